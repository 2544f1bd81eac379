"""Named seed streams: every pipeline stage derives its own seed from the
root seed and a stream name, so stages are independently reproducible."""

from __future__ import annotations

import hashlib


def derive_seed(root: int, name: str) -> int:
    h = hashlib.blake2b(name.encode("utf-8"),
                        key=int(root).to_bytes(8, "little", signed=False),
                        digest_size=8)
    return int.from_bytes(h.digest(), "little") % (2 ** 63)
