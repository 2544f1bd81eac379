"""Uniform asymmetric fake quantization for weights and activations.

Quantize-dequantize round trip:

    x_bar = clip(round(x / s) + z, 0, 2^b - 1)
    x_hat = (x_bar - z) * s

with half-away-from-zero rounding. Weights are quantized per output channel,
activations per tensor. During reconstruction the weight rounding is relaxed
to floor(x/s) + h(alpha) with h the rectified sigmoid (AdaRound), and the
activation step size s learns through a clipping-aware straight-through
gradient (LSQ-style); gradients w.r.t. the input pass through inside the
clipping range and are zero outside.

The 32-bit width is a pass-through sentinel: fake_quant returns its input
unchanged, bit-exactly.
"""

from __future__ import annotations

import numpy as np

from .ndcore import Tensor, make_node, no_grad
from .ndcore.ops import _sigmoid
from .net import Capture, ModelGraph, default_exec


class QuantError(Exception):
    pass


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


class QuantizerState:
    """Parameters of one quantization site (a layer's weight or its input)."""

    def __init__(self, bits: int, mode: str):
        if mode not in ("weight_per_channel", "act_per_tensor"):
            raise QuantError(f"unknown quantizer mode {mode!r}")
        if not (2 <= bits <= 8 or bits == 32):
            raise QuantError(f"bits must be in [2,8] or the 32 sentinel, got {bits}")
        self.bits = bits
        self.mode = mode
        self.scale: Tensor | None = None        # (C,) weights / (1,) activations
        self.zero_point: np.ndarray | None = None
        self.alpha: Tensor | None = None        # soft-rounding vars (weights only)
        self.degenerate: np.ndarray | None = None
        self.chosen_k: np.ndarray | None = None
        self.initialized = False

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    @property
    def passthrough(self) -> bool:
        return self.bits >= 32

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"scale": self.scale.data, "zero_point": self.zero_point,
               "degenerate": self.degenerate.astype(np.float32),
               "chosen_k": self.chosen_k.astype(np.float32)}
        if self.alpha is not None:
            out["alpha"] = self.alpha.data
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        self.scale = Tensor(arrays["scale"].astype(np.float32))
        self.zero_point = arrays["zero_point"].astype(np.float32)
        self.degenerate = arrays["degenerate"].astype(bool)
        self.chosen_k = arrays["chosen_k"].astype(np.int64)
        if "alpha" in arrays:
            self.alpha = Tensor(arrays["alpha"].astype(np.float32))
        self.initialized = True


# ---------------------------------------------------------------------------
# range initialization (grid search minimizing quantize-dequantize SSE)
# ---------------------------------------------------------------------------

def _search_range_1d(x: np.ndarray, bits: int) -> tuple[float, float, bool, int]:
    """Return (scale, zero_point, degenerate, chosen_k) for one value pool.

    Candidate ranges symmetrically shrink [min, max] to k% of its width,
    k = 100..50; the candidate with the lowest SSE wins (ties keep the wider
    range since iteration is descending with a strict comparison).
    """
    qmax = (1 << bits) - 1
    x64 = x.astype(np.float64).ravel()
    lo0, hi0 = float(x64.min()), float(x64.max())
    if hi0 == lo0:
        return 1.0, 0.0, True, 100
    width = hi0 - lo0
    best = (np.inf, 1.0, 0.0, 100)
    for k in range(100, 49, -1):
        delta = (1.0 - k / 100.0) / 2.0 * width
        lo, hi = lo0 + delta, hi0 - delta
        s = (hi - lo) / qmax
        z = float(np.clip(round_half_away(np.asarray(-lo / s)), 0, qmax))
        q = np.clip(round_half_away(x64 / s) + z, 0, qmax)
        err = x64 - (q - z) * s
        sse = float(np.dot(err, err))
        if sse < best[0]:
            best = (sse, s, z, k)
    return best[1], best[2], False, best[3]


def init_range(x_samples: np.ndarray, q: QuantizerState) -> QuantizerState:
    """Fit scale/zero-point from samples; weight mode solves per output channel."""
    x = np.asarray(x_samples)
    if x.size == 0:
        raise QuantError("init_range requires a non-empty sample pool")
    if q.passthrough:
        q.scale = Tensor(np.ones(1, dtype=np.float32))
        q.zero_point = np.zeros(1, dtype=np.float32)
        q.degenerate = np.zeros(1, dtype=bool)
        q.chosen_k = np.full(1, 100, dtype=np.int64)
        q.initialized = True
        return q
    if q.mode == "weight_per_channel":
        rows = x.reshape(x.shape[0], -1)
        res = [_search_range_1d(rows[c], q.bits) for c in range(rows.shape[0])]
        q.scale = Tensor(np.array([r[0] for r in res], dtype=np.float32))
        q.zero_point = np.array([r[1] for r in res], dtype=np.float32)
        q.degenerate = np.array([r[2] for r in res], dtype=bool)
        q.chosen_k = np.array([r[3] for r in res], dtype=np.int64)
    else:
        s, z, deg, k = _search_range_1d(x, q.bits)
        q.scale = Tensor(np.array([s], dtype=np.float32))
        q.zero_point = np.array([z], dtype=np.float32)
        q.degenerate = np.array([deg])
        q.chosen_k = np.array([k], dtype=np.int64)
    q.initialized = True
    return q


def init_rounding(q: QuantizerState, w: np.ndarray):
    """AdaRound warm start: h(alpha) = frac(w/s), so the soft weight equals w
    and hardening at init is exactly nearest rounding."""
    if q.passthrough:
        return
    s = _channel_view(q.scale.data, w)
    u = w.astype(np.float64) / s
    rest = u - np.floor(u)
    p = np.clip((rest + 0.1) / 1.2, 1e-2, 1.0 - 1e-2)
    q.alpha = Tensor(np.log(p / (1.0 - p)).astype(np.float32))


def _channel_view(vec: np.ndarray, like: np.ndarray) -> np.ndarray:
    if vec.shape[0] == 1:
        return vec.reshape((1,) * like.ndim)
    return vec.reshape((vec.shape[0],) + (1,) * (like.ndim - 1))


# ---------------------------------------------------------------------------
# numpy fake-quant paths (inference / init)
# ---------------------------------------------------------------------------

def quantize_array(x: np.ndarray, q: QuantizerState, rounding: str = "nearest") -> np.ndarray:
    """Quantize-dequantize a raw array. rounding: nearest | hard (binarized
    alpha) | soft (continuous alpha)."""
    if q.passthrough:
        return x
    if not q.initialized:
        raise QuantError("quantizer not initialized")
    s = _channel_view(q.scale.data, x).astype(x.dtype)
    z = _channel_view(q.zero_point, x).astype(x.dtype)
    u = x / s
    if rounding == "nearest":
        v = round_half_away(u) + z
    elif rounding in ("hard", "soft"):
        if q.alpha is None:
            raise QuantError("no rounding variables attached")
        h = (q.alpha.data >= 0).astype(x.dtype) if rounding == "hard" \
            else np.clip(_sigmoid(q.alpha.data) * 1.2 - 0.1, 0.0, 1.0).astype(x.dtype)
        v = np.floor(u) + h + z
    else:
        raise QuantError(f"unknown rounding {rounding!r}")
    out = (np.clip(v, 0, q.qmax) - z) * s
    deg = _channel_view(q.degenerate, x)
    if deg.any():
        out = np.where(np.broadcast_to(deg, x.shape), x, out)
    return out.astype(x.dtype)


# ---------------------------------------------------------------------------
# graph fake-quant ops (reconstruction)
# ---------------------------------------------------------------------------

def fq_act(x: Tensor, q: QuantizerState) -> Tensor:
    """Activation fake quant; gradients: STE to x inside the clip range, and
    the LSQ derivative to the step size s."""
    if q.passthrough:
        return x
    if not q.initialized:
        raise QuantError("quantizer not initialized")
    if bool(q.degenerate[0]):
        return x
    s_t = q.scale
    s = float(s_t.data[0])
    z = float(q.zero_point[0])
    u = x.data / x.data.dtype.type(s)
    r = round_half_away(u)
    v = r + z
    below = v < 0
    above = v > q.qmax
    inside = ~(below | above)
    out = ((np.clip(v, 0, q.qmax) - z) * s).astype(x.data.dtype)

    def bwd(g):
        gx = (g * inside).astype(x.dtype)
        ds = np.where(inside, r - u, np.where(below, -z, q.qmax - z))
        gs = np.array([(g.astype(np.float64) * ds).sum()])
        return gx, gs.astype(s_t.dtype)

    return make_node("fq_act", out, (x, s_t), bwd)


def fq_weight_soft(w: Tensor, q: QuantizerState) -> Tensor:
    """Soft-rounded weight fake quant; gradients flow only into alpha."""
    if q.passthrough:
        return w
    if not q.initialized or q.alpha is None:
        raise QuantError("quantizer not initialized with rounding variables")
    alpha = q.alpha
    wd = w.data
    s = _channel_view(q.scale.data, wd).astype(wd.dtype)
    z = _channel_view(q.zero_point, wd).astype(wd.dtype)
    u = wd / s
    fl = np.floor(u)
    sig = _sigmoid(alpha.data)
    raw = sig * 1.2 - 0.1
    h = np.clip(raw, 0.0, 1.0)
    v = fl + h + z
    inside = (v >= 0) & (v <= q.qmax)
    out = ((np.clip(v, 0, q.qmax) - z) * s).astype(wd.dtype)
    deg = np.broadcast_to(_channel_view(q.degenerate, wd), wd.shape)
    if deg.any():
        out = np.where(deg, wd, out)

    def bwd(g):
        dh = 1.2 * sig * (1.0 - sig) * ((raw > 0.0) & (raw < 1.0))
        ga = g * s * (inside & ~deg) * dh
        return (ga.astype(alpha.dtype),)

    return make_node("fq_weight_soft", out, (alpha,), bwd)


def rect_sigmoid(alpha: Tensor) -> Tensor:
    """h(alpha) = clip(sigmoid(alpha)*1.2 - 0.1, 0, 1) as a graph op (used by
    the rounding regularizer)."""
    sig = _sigmoid(alpha.data)
    raw = sig * 1.2 - 0.1
    out = np.clip(raw, 0.0, 1.0).astype(alpha.data.dtype)

    def bwd(g):
        dh = 1.2 * sig * (1.0 - sig) * ((raw > 0.0) & (raw < 1.0))
        return ((g * dh).astype(alpha.dtype),)

    return make_node("rect_sigmoid", out, (alpha,), bwd)


def fake_quant(x, q: QuantizerState, soft: bool = False):
    """Convenience dispatch matching the spec surface: Tensor in, Tensor out."""
    if isinstance(x, np.ndarray):
        return quantize_array(x, q, "soft" if soft else "nearest")
    if q.mode == "act_per_tensor":
        return fq_act(x, q)
    if soft:
        return fq_weight_soft(x, q)
    return Tensor(quantize_array(x.data, q,
                                 "hard" if q.alpha is not None else "nearest"))


# ---------------------------------------------------------------------------
# quantized model wrapper
# ---------------------------------------------------------------------------

W_OFF, W_HARD, W_SOFT = "off", "hard", "soft"


class QuantizedModel:
    """A ModelGraph plus per-layer quantizer pairs and mode switches.

    Weight modes: off (full precision) | hard (binarized rounding, cached) |
    soft (learnable rounding in the graph). Activation quantizers are on/off.
    """

    def __init__(self, base: ModelGraph, bits_w: int, bits_a: int):
        self.base = base
        self.bits_w = bits_w
        self.bits_a = bits_a
        self.wq: dict[str, QuantizerState] = {}
        self.aq: dict[str, QuantizerState] = {}
        self.w_mode: dict[str, str] = {}
        self.a_on: dict[str, bool] = {}
        self._hard_cache: dict[str, Tensor] = {}
        for layer in base.conv_linear_layers():
            self.wq[layer.name] = QuantizerState(bits_w, "weight_per_channel")
            self.aq[layer.name] = QuantizerState(bits_a, "act_per_tensor")
            self.w_mode[layer.name] = W_HARD
            self.a_on[layer.name] = True

    @property
    def arch(self):
        return self.base.arch

    @property
    def config(self):
        return self.base.config

    def layer_names(self) -> list[str]:
        return [l.name for l in self.base.conv_linear_layers()]

    def invalidate(self, name: str | None = None):
        if name is None:
            self._hard_cache.clear()
        else:
            self._hard_cache.pop(name, None)

    def _hard_weight(self, layer) -> Tensor:
        t = self._hard_cache.get(layer.name)
        if t is None:
            q = self.wq[layer.name]
            rounding = "hard" if q.alpha is not None else "nearest"
            t = Tensor(quantize_array(layer.weight.data, q, rounding))
            self._hard_cache[layer.name] = t
        return t

    def exec_layer(self, layer, x: Tensor) -> Tensor:
        if self.a_on[layer.name]:
            x = fq_act(x, self.aq[layer.name])
        wm = self.w_mode[layer.name]
        if wm == W_OFF:
            w = layer.weight
        elif wm == W_SOFT:
            w = fq_weight_soft(layer.weight, self.wq[layer.name])
        else:
            w = self._hard_weight(layer)
        shim = type(layer)(layer.name, layer.kind, w, layer.bias, layer.padding)
        return default_exec(shim, x)

    def forward(self, x, t, capture: Capture | None = None) -> Tensor:
        return self.base.forward(x, t, ex=self.exec_layer, capture=capture)

    # -- serialization ------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in self.layer_names():
            for site, q in (("w", self.wq[name]), ("a", self.aq[name])):
                if not q.initialized:
                    continue
                for field, arr in q.state_arrays().items():
                    out[f"quant.{name}.{site}.{field}"] = arr
        return out

    def state_meta(self) -> dict:
        return {"quant": {"bits_w": self.bits_w, "bits_a": self.bits_a,
                          "w_mode": self.w_mode, "a_on": self.a_on}}


def attach_quantizers(model: ModelGraph, bits_w: int, bits_a: int, calib,
                      batch: int = 64) -> QuantizedModel:
    """Create and initialize quantizers for every conv/linear layer.

    Weight ranges come from the weights themselves (per channel); activation
    ranges from full-precision forwards over the calibration items, pooled
    across all timesteps (one shared scale per layer). Rounding variables are
    warm-started so hardening reproduces nearest rounding.
    """
    n_items = calib.x.shape[0]
    if n_items == 0:
        raise QuantError("calibration set is empty")
    qm = QuantizedModel(model, bits_w, bits_a)
    for layer in model.conv_linear_layers():
        q = qm.wq[layer.name]
        init_range(layer.weight.data, q)
        init_rounding(q, layer.weight.data)

    pools: dict[str, list[np.ndarray]] = {n: [] for n in qm.layer_names()}
    for lo in range(0, n_items, batch):
        hi = min(lo + batch, n_items)
        cap = Capture(layers=True)
        with no_grad():
            model.forward(calib.x[lo:hi], calib.t[lo:hi], capture=cap)
        for name, (lin, _) in cap.layers.items():
            pools[name].append(lin.data.reshape(-1))
    for name in qm.layer_names():
        init_range(np.concatenate(pools[name]), qm.aq[name])
    qm.invalidate()
    return qm


def restore_quantized(model: ModelGraph, tensors: dict[str, np.ndarray],
                      meta: dict) -> QuantizedModel:
    info = meta["quant"]
    qm = QuantizedModel(model, int(info["bits_w"]), int(info["bits_a"]))
    grouped: dict[tuple[str, str], dict[str, np.ndarray]] = {}
    for key, arr in tensors.items():
        if not key.startswith("quant."):
            continue
        body = key[len("quant."):]
        name, site, field = body.rsplit(".", 2)
        grouped.setdefault((name, site), {})[field] = arr
    for (name, site), arrays in grouped.items():
        q = qm.wq[name] if site == "w" else qm.aq[name]
        q.load_arrays(arrays)
    qm.w_mode = dict(info["w_mode"])
    qm.a_on = {k: bool(v) for k, v in info["a_on"].items()}
    qm.invalidate()
    return qm
