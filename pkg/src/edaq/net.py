"""Denoiser architectures and their decomposition into reconstruction blocks.

Two architectures:
  * tiny_unet: 1x8x8 input; down stage (2 residual bottleneck blocks, widths
    base -> 2*base, one 2x downsample), mid stage (residual block + single-head
    attention at 4x4), up stage (2 residual blocks with nin_shortcut forced by
    concat skips, one upsample), output conv. ~190K params at base=24.
  * mlp_denoiser: 2-d input, three hidden linear layers of width 64 with SiLU.

Every conv/linear layer belongs to exactly one block; residual blocks expose
conv1/temb_proj as front layers (their outputs are not part of the block
output), attention blocks expose q/k/v. Layer executors can be injected so a
quantized wrapper reuses the same wiring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import io
from .ndcore import (
    Tensor, add, avg_pool2x, concat, conv2d, group_norm, linear, matmul, mean,
    reshape, scalar_affine, silu, sin, cos, softmax, transpose, upsample2x,
)

RESIDUAL = "residual_bottleneck"
ATTENTION = "attention"
STANDALONE = "standalone"


@dataclass
class LayerSpec:
    name: str
    kind: str                     # "conv" | "linear"
    weight: Tensor
    bias: Tensor | None
    padding: str = "same"         # conv only

    @property
    def quant_sites(self) -> tuple[str, str]:
        return f"{self.name}.w", f"{self.name}.a"

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class BlockSpec:
    name: str
    kind: str
    layers: list[LayerSpec]
    front_layers: list[str]       # layer names whose outputs are observation targets


class Capture:
    """Forward-pass observation flags and storage. Observation-only: capture
    never changes the computed values."""

    def __init__(self, mid: bool = False, layers: bool = False,
                 blocks: bool = False):
        self.want_mid = mid
        self.want_layers = layers
        self.want_blocks = blocks
        self.mid: Tensor | None = None
        self.temb: Tensor | None = None
        self.layers: dict[str, tuple[Tensor, Tensor]] = {}
        self.blocks: dict[str, tuple[Tensor, Tensor]] = {}


def default_exec(layer: LayerSpec, x: Tensor) -> Tensor:
    if layer.kind == "conv":
        y = conv2d(x, layer.weight, padding=layer.padding)
        return add(y, layer.bias) if layer.bias is not None else y
    return linear(x, layer.weight, layer.bias)


def _apply(layer: LayerSpec, x: Tensor, ex, cap: Capture | None) -> Tensor:
    y = ex(layer, x)
    if cap is not None and cap.want_layers:
        cap.layers[layer.name] = (x, y)
    return y


class TimeEmbed:
    """Sinusoidal embedding (parameter-free) followed by two linear layers.
    Kept full-precision: its layers are not reconstruction blocks."""

    def __init__(self, sin_dim: int, dim: int, rng: np.random.Generator):
        self.sin_dim = sin_dim
        self.dim = dim
        self.fc1 = _make_linear("time_embed.fc1", sin_dim, dim, rng)
        self.fc2 = _make_linear("time_embed.fc2", dim, dim, rng)
        half = sin_dim // 2
        self._freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)

    def forward(self, t: np.ndarray) -> Tensor:
        tcol = Tensor(np.asarray(t, dtype=np.float32).reshape(-1, 1))
        args = matmul(tcol, Tensor(self._freqs.reshape(1, -1)))
        emb = concat([sin(args), cos(args)], axis=1)
        h = silu(default_exec(self.fc1, emb))
        return default_exec(self.fc2, h)

    def named(self):
        return {
            "time_embed.fc1.weight": self.fc1.weight,
            "time_embed.fc1.bias": self.fc1.bias,
            "time_embed.fc2.weight": self.fc2.weight,
            "time_embed.fc2.bias": self.fc2.bias,
        }


class ResidualBlock:
    """norm -> SiLU -> conv1 -> +temb_proj -> norm -> SiLU -> conv2, additive
    shortcut (nin_shortcut 1x1 conv when channel counts differ)."""

    kind = RESIDUAL

    def __init__(self, name: str, in_ch: int, out_ch: int, temb_dim: int,
                 groups: int, rng: np.random.Generator):
        self.name = name
        self.groups = groups
        self.norm1_gamma = Tensor(np.ones(in_ch), name=f"{name}.norm1.gamma")
        self.norm1_beta = Tensor(np.zeros(in_ch), name=f"{name}.norm1.beta")
        self.conv1 = _make_conv(f"{name}.conv1", in_ch, out_ch, 3, rng)
        self.temb_proj = _make_linear(f"{name}.temb_proj", temb_dim, out_ch, rng)
        self.norm2_gamma = Tensor(np.ones(out_ch), name=f"{name}.norm2.gamma")
        self.norm2_beta = Tensor(np.zeros(out_ch), name=f"{name}.norm2.beta")
        self.conv2 = _make_conv(f"{name}.conv2", out_ch, out_ch, 3, rng)
        self.nin_shortcut = None
        if in_ch != out_ch:
            self.nin_shortcut = _make_conv(f"{name}.nin_shortcut", in_ch, out_ch, 1, rng)

    def forward(self, x: Tensor, temb: Tensor, ex, cap: Capture | None) -> Tensor:
        h = silu(group_norm(x, self.norm1_gamma, self.norm1_beta, self.groups))
        h = _apply(self.conv1, h, ex, cap)
        h = add(h, _apply(self.temb_proj, silu(temb), ex, cap))
        h = silu(group_norm(h, self.norm2_gamma, self.norm2_beta, self.groups))
        h = _apply(self.conv2, h, ex, cap)
        sc = _apply(self.nin_shortcut, x, ex, cap) if self.nin_shortcut else x
        out = add(h, sc)
        if cap is not None and cap.want_blocks:
            cap.blocks[self.name] = (x, out)
        return out

    def layers(self) -> list[LayerSpec]:
        ls = [self.conv1, self.temb_proj, self.conv2]
        if self.nin_shortcut:
            ls.append(self.nin_shortcut)
        return ls

    def spec(self) -> BlockSpec:
        return BlockSpec(self.name, self.kind, self.layers(),
                         [self.conv1.name, self.temb_proj.name])

    def named(self):
        out = {
            f"{self.name}.norm1.gamma": self.norm1_gamma,
            f"{self.name}.norm1.beta": self.norm1_beta,
        }
        for l in (self.conv1, self.temb_proj):
            out[f"{l.name}.weight"] = l.weight
            out[f"{l.name}.bias"] = l.bias
        out[f"{self.name}.norm2.gamma"] = self.norm2_gamma
        out[f"{self.name}.norm2.beta"] = self.norm2_beta
        out[f"{self.conv2.name}.weight"] = self.conv2.weight
        out[f"{self.conv2.name}.bias"] = self.conv2.bias
        if self.nin_shortcut:
            out[f"{self.nin_shortcut.name}.weight"] = self.nin_shortcut.weight
            out[f"{self.nin_shortcut.name}.bias"] = self.nin_shortcut.bias
        return out


class AttentionBlock:
    """Single-head self-attention over spatial positions; q/k/v/proj_out are
    1x1 convs, softmax over positions, residual output."""

    kind = ATTENTION

    def __init__(self, name: str, ch: int, groups: int, rng: np.random.Generator):
        self.name = name
        self.groups = groups
        self.norm_gamma = Tensor(np.ones(ch), name=f"{name}.norm.gamma")
        self.norm_beta = Tensor(np.zeros(ch), name=f"{name}.norm.beta")
        self.q = _make_conv(f"{name}.q", ch, ch, 1, rng)
        self.k = _make_conv(f"{name}.k", ch, ch, 1, rng)
        self.v = _make_conv(f"{name}.v", ch, ch, 1, rng)
        self.proj_out = _make_conv(f"{name}.proj_out", ch, ch, 1, rng)

    def forward(self, x: Tensor, temb: Tensor, ex, cap: Capture | None) -> Tensor:
        B, C, H, W = x.shape
        hn = silu_free = group_norm(x, self.norm_gamma, self.norm_beta, self.groups)
        q = _apply(self.q, hn, ex, cap)
        k = _apply(self.k, hn, ex, cap)
        v = _apply(self.v, hn, ex, cap)
        qf = transpose(reshape(q, (B, C, H * W)), (0, 2, 1))
        kf = reshape(k, (B, C, H * W))
        w = softmax(scalar_affine(matmul(qf, kf), C ** -0.5, 0.0), axis=-1)
        vf = reshape(v, (B, C, H * W))
        h = reshape(matmul(vf, transpose(w, (0, 2, 1))), (B, C, H, W))
        h = _apply(self.proj_out, h, ex, cap)
        out = add(x, h)
        if cap is not None and cap.want_blocks:
            cap.blocks[self.name] = (x, out)
        return out

    def layers(self) -> list[LayerSpec]:
        return [self.q, self.k, self.v, self.proj_out]

    def spec(self) -> BlockSpec:
        return BlockSpec(self.name, self.kind, self.layers(),
                         [self.q.name, self.k.name, self.v.name])

    def named(self):
        out = {
            f"{self.name}.norm.gamma": self.norm_gamma,
            f"{self.name}.norm.beta": self.norm_beta,
        }
        for l in self.layers():
            out[f"{l.name}.weight"] = l.weight
            out[f"{l.name}.bias"] = l.bias
        return out


class StandaloneBlock:
    """A single conv/linear layer reconstructed on its own (no front layers)."""

    kind = STANDALONE

    def __init__(self, layer: LayerSpec):
        self.name = layer.name
        self.layer = layer

    def forward(self, x: Tensor, temb: Tensor, ex, cap: Capture | None) -> Tensor:
        out = _apply(self.layer, x, ex, cap)
        if cap is not None and cap.want_blocks:
            cap.blocks[self.name] = (x, out)
        return out

    def layers(self) -> list[LayerSpec]:
        return [self.layer]

    def spec(self) -> BlockSpec:
        return BlockSpec(self.name, self.kind, [self.layer], [])

    def named(self):
        out = {f"{self.layer.name}.weight": self.layer.weight}
        if self.layer.bias is not None:
            out[f"{self.layer.name}.bias"] = self.layer.bias
        return out


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def _make_conv(name, in_ch, out_ch, k, rng) -> LayerSpec:
    w = Tensor(_he_uniform(rng, (out_ch, in_ch, k, k), in_ch * k * k),
               name=f"{name}.weight")
    b = Tensor(np.zeros(out_ch, dtype=np.float32), name=f"{name}.bias")
    return LayerSpec(name, "conv", w, b, padding="same")


def _make_linear(name, in_f, out_f, rng) -> LayerSpec:
    w = Tensor(_he_uniform(rng, (out_f, in_f), in_f), name=f"{name}.weight")
    b = Tensor(np.zeros(out_f, dtype=np.float32), name=f"{name}.bias")
    return LayerSpec(name, "linear", w, b)


DEFAULT_CONFIGS = {
    "tiny_unet": {"in_ch": 1, "image_size": 8, "base": 24, "temb_dim": 16,
                  "sin_dim": 32, "groups": 4, "mid_tap": "mid.attn"},
    "mlp_denoiser": {"in_dim": 2, "hidden": 64, "temb_dim": 16, "sin_dim": 32,
                     "mid_tap": "fc2"},
}


class ModelGraph:
    def __init__(self, arch: str, config: dict, seed: int):
        if arch not in DEFAULT_CONFIGS:
            raise ValueError(f"unknown arch {arch!r}")
        self.arch = arch
        self.config = dict(DEFAULT_CONFIGS[arch])
        self.config.update(config or {})
        self.seed = seed
        rng = np.random.default_rng(seed)
        cfg = self.config
        self.time_embed = TimeEmbed(cfg["sin_dim"], cfg["temb_dim"], rng)
        self.blocks: list = []
        if arch == "tiny_unet":
            b, g, td = cfg["base"], cfg["groups"], cfg["temb_dim"]
            self.blocks = [
                StandaloneBlock(_make_conv("conv_in", cfg["in_ch"], b, 3, rng)),
                ResidualBlock("down.res0", b, b, td, g, rng),
                ResidualBlock("down.res1", b, 2 * b, td, g, rng),
                ResidualBlock("mid.res", 2 * b, 2 * b, td, g, rng),
                AttentionBlock("mid.attn", 2 * b, g, rng),
                ResidualBlock("up.res0", 4 * b, 2 * b, td, g, rng),
                ResidualBlock("up.res1", 3 * b, b, td, g, rng),
            ]
            self.norm_out_gamma = Tensor(np.ones(b), name="norm_out.gamma")
            self.norm_out_beta = Tensor(np.zeros(b), name="norm_out.beta")
            self.blocks.append(
                StandaloneBlock(_make_conv("conv_out", b, cfg["in_ch"], 3, rng)))
        else:
            d, h, td = cfg["in_dim"], cfg["hidden"], cfg["temb_dim"]
            self.blocks = [
                StandaloneBlock(_make_linear("fc1", d + td, h, rng)),
                StandaloneBlock(_make_linear("fc2", h, h, rng)),
                StandaloneBlock(_make_linear("fc3", h, h, rng)),
                StandaloneBlock(_make_linear("fc_out", h, d, rng)),
            ]
        self.mid_tap = self.config["mid_tap"]
        names = [b.name for b in self.blocks]
        if self.mid_tap not in names:
            raise ValueError(f"mid_tap {self.mid_tap!r} is not a block name")
        by_name = {}
        for blk in self.blocks:
            for l in blk.layers():
                if l.name in by_name:
                    raise ValueError(f"duplicate layer name {l.name}")
                by_name[l.name] = l
        self._layers_by_name = by_name

    # -- structure ---------------------------------------------------------

    def block_specs(self) -> list[BlockSpec]:
        return [b.spec() for b in self.blocks]

    def conv_linear_layers(self) -> list[LayerSpec]:
        return [l for b in self.blocks for l in b.layers()]

    def layer(self, name: str) -> LayerSpec:
        return self._layers_by_name[name]

    def block(self, name: str):
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def named_tensors(self) -> dict[str, Tensor]:
        out = dict(self.time_embed.named())
        for b in self.blocks:
            out.update(b.named())
        if self.arch == "tiny_unet":
            out["norm_out.gamma"] = self.norm_out_gamma
            out["norm_out.beta"] = self.norm_out_beta
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def count_params(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag

    # -- execution ----------------------------------------------------------

    def forward(self, x, t, ex=None, capture: Capture | None = None) -> Tensor:
        """Predict the noise for state x at timestep(s) t. `capture` observes
        intermediate values; `ex` substitutes the layer executor."""
        ex = ex or default_exec
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64).reshape(-1), (B,))
        temb = self.time_embed.forward(t)
        if capture is not None:
            capture.temb = temb
        if self.arch == "tiny_unet":
            out = self._forward_unet(x, temb, ex, capture)
        else:
            out = self._forward_mlp(x, temb, ex, capture)
        if out.shape != x.shape:
            raise AssertionError("noise prediction must preserve input shape")
        return out

    def _tap(self, name: str, h: Tensor, capture: Capture | None):
        if capture is not None and capture.want_mid and name == self.mid_tap:
            capture.mid = h

    def _forward_unet(self, x, temb, ex, cap):
        conv_in, d0, d1, midr, mida, u0, u1, conv_out = self.blocks
        h = conv_in.forward(x, temb, ex, cap)
        self._tap(conv_in.name, h, cap)
        s0 = d0.forward(h, temb, ex, cap)
        self._tap(d0.name, s0, cap)
        h = avg_pool2x(s0)
        s1 = d1.forward(h, temb, ex, cap)
        self._tap(d1.name, s1, cap)
        h = midr.forward(s1, temb, ex, cap)
        self._tap(midr.name, h, cap)
        h = mida.forward(h, temb, ex, cap)
        self._tap(mida.name, h, cap)
        h = u0.forward(concat([h, s1], axis=1), temb, ex, cap)
        self._tap(u0.name, h, cap)
        h = upsample2x(h)
        h = u1.forward(concat([h, s0], axis=1), temb, ex, cap)
        self._tap(u1.name, h, cap)
        h = silu(group_norm(h, self.norm_out_gamma, self.norm_out_beta,
                            self.config["groups"]))
        out = conv_out.forward(h, temb, ex, cap)
        self._tap(conv_out.name, out, cap)
        return out

    def _forward_mlp(self, x, temb, ex, cap):
        fc1, fc2, fc3, fc_out = self.blocks
        h = concat([x, temb], axis=1)
        h = silu(fc1.forward(h, temb, ex, cap))
        self._tap(fc1.name, h, cap)
        h = silu(fc2.forward(h, temb, ex, cap))
        self._tap(fc2.name, h, cap)
        h = silu(fc3.forward(h, temb, ex, cap))
        self._tap(fc3.name, h, cap)
        out = fc_out.forward(h, temb, ex, cap)
        self._tap(fc_out.name, out, cap)
        return out


def build_model(arch: str, config: dict | None = None, seed: int = 0) -> ModelGraph:
    return ModelGraph(arch, config or {}, seed)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: ModelGraph, path, extra_tensors: dict | None = None,
                    extra_meta: dict | None = None):
    """Bit-exact round trip, including any extra (e.g. quantizer) tensors."""
    tensors = {k: t.data for k, t in model.named_tensors().items()}
    overlap = set(tensors) & set(extra_tensors or {})
    if overlap:
        raise io.ManifestError(f"extra tensors collide with model names: {overlap}")
    tensors.update({k: np.asarray(v) for k, v in (extra_tensors or {}).items()})
    meta = {"arch": model.arch, "config": model.config, "seed": model.seed}
    meta.update(extra_meta or {})
    io.save_container(path, tensors, meta)


def load_checkpoint(path) -> tuple[ModelGraph, dict[str, np.ndarray], dict]:
    """Rebuild the model and return (model, leftover_tensors, metadata).

    Leftover tensors are manifest entries that do not belong to the model
    (quantizer states use the "quant." prefix).
    """
    tensors, meta = io.load_container(path)
    model = build_model(meta["arch"], meta.get("config"), int(meta.get("seed", 0)))
    named = model.named_tensors()
    for name, t in named.items():
        if name not in tensors:
            raise io.ManifestError(f"{path}: missing model tensor {name!r}")
        arr = tensors.pop(name)
        if arr.shape != t.data.shape:
            raise io.ManifestError(f"{path}: shape mismatch for {name!r}: "
                                   f"{arr.shape} vs {t.data.shape}")
        t.data = arr.astype(np.float32)
    return model, tensors, meta
