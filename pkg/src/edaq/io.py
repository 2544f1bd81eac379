"""Binary artifact container.

Layout: magic "EDAQ" | u32 version (LE) | u64 metadata length (LE) |
UTF-8 JSON metadata | concatenated raw little-endian float32 blobs in
manifest order. The metadata carries a tensor manifest of
{name, shape, dtype, offset} plus arbitrary keys (arch, config, ...).
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"EDAQ"
VERSION = 1


class ContainerError(Exception):
    pass


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedBlobError(ContainerError):
    pass


class ManifestError(ContainerError):
    pass


def save_container(path, tensors: dict[str, np.ndarray], metadata: dict | None = None):
    """Write tensors plus metadata; tensor bytes are stored as little-endian f32."""
    meta = dict(metadata or {})
    manifest = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape),
                         "dtype": "<f4", "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    meta["tensors"] = manifest
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(meta_bytes)))
        f.write(meta_bytes)
        for b in blobs:
            f.write(b)


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (tensors, metadata); errors are reported distinctly."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise VersionError(f"{path}: version {version}, expected {VERSION}")
    (meta_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + meta_len > len(raw):
        raise TruncatedBlobError(f"{path}: metadata extends past end of file")
    try:
        meta = json.loads(raw[16:16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ManifestError(f"{path}: unreadable metadata: {e}") from None
    manifest = meta.get("tensors")
    if not isinstance(manifest, list):
        raise ManifestError(f"{path}: missing tensor manifest")
    blob = raw[16 + meta_len:]
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest:
        try:
            name = entry["name"]
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
            dtype = entry["dtype"]
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"{path}: malformed manifest entry: {e}") from None
        if dtype != "<f4":
            raise ManifestError(f"{path}: unsupported dtype {dtype!r} for {name!r}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 4 * count
        if offset < 0 or end > len(blob):
            raise TruncatedBlobError(f"{path}: blob for {name!r} truncated "
                                     f"(needs bytes [{offset}, {end}), have {len(blob)})")
        arr = np.frombuffer(blob[offset:end], dtype="<f4")
        if arr.size != count:
            raise ManifestError(f"{path}: {name!r} declares shape {shape} "
                                f"({count} values) but blob holds {arr.size}")
        tensors[name] = arr.reshape(shape).copy()
    return tensors, meta
