"""Forward primitives and their gradients.

Conventions:
  * storage dtype follows the inputs (float32 by default, float64 when callers
    build float64 tensors, e.g. the finite-difference checker);
  * reductions (sum, mean, matmul/conv inner loops, norm statistics) accumulate
    in float64 and cast back to the storage dtype;
  * broadcasting is limited to scalar-affine and the bias-add patterns of
    `add`; everything else requires explicit reshape.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, ShapeError, make_node

F64 = np.float64


def _dt(*tensors: Tensor):
    return np.result_type(*(t.data.dtype for t in tensors))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also the only sanctioned bias-add broadcasts:

       (B,C,H,W) + (C,)    channel bias
       (...,F)   + (F,)    last-dim bias
       (B,C,H,W) + (B,C)   per-sample channel shift (timestep embedding)
    """
    dt = _dt(a, b)
    ash, bsh = a.data.shape, b.data.shape
    if ash == bsh:
        out = a.data.astype(dt) + b.data.astype(dt)

        def bwd(g):
            return g.astype(a.dtype), g.astype(b.dtype)
    elif a.data.ndim == 4 and b.data.ndim == 1 and bsh[0] == ash[1]:
        out = a.data.astype(dt) + b.data.reshape(1, -1, 1, 1).astype(dt)

        def bwd(g):
            gb = g.astype(F64).sum(axis=(0, 2, 3))
            return g.astype(a.dtype), gb.astype(b.dtype)
    elif b.data.ndim == 1 and a.data.ndim >= 2 and bsh[0] == ash[-1]:
        out = a.data.astype(dt) + b.data.astype(dt)

        def bwd(g):
            gb = g.astype(F64).sum(axis=tuple(range(g.ndim - 1)))
            return g.astype(a.dtype), gb.astype(b.dtype)
    elif a.data.ndim == 4 and b.data.ndim == 2 and bsh == ash[:2]:
        out = a.data.astype(dt) + b.data[:, :, None, None].astype(dt)

        def bwd(g):
            gb = g.astype(F64).sum(axis=(2, 3))
            return g.astype(a.dtype), gb.astype(b.dtype)
    else:
        raise ShapeError("add", f"incompatible shapes {ash} + {bsh}")
    return make_node("add", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError("mul", f"incompatible shapes {a.shape} * {b.shape}")
    out = a.data * b.data

    def bwd(g):
        return (g * b.data).astype(a.dtype), (g * a.data).astype(b.dtype)

    return make_node("mul", out, (a, b), bwd)


def scalar_affine(x: Tensor, scale: float, shift: float) -> Tensor:
    scale = float(scale)
    shift = float(shift)
    out = x.data * x.data.dtype.type(scale) + x.data.dtype.type(shift)

    def bwd(g):
        return ((g * scale).astype(x.dtype),)

    return make_node("scalar_affine", out, (x,), bwd)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = (x.data * s).astype(x.dtype)

    def bwd(g):
        return ((g * (s * (1.0 + x.data * (1.0 - s)))).astype(x.dtype),)

    return make_node("silu", out, (x,), bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # max-subtraction form: only exponentiates non-positive values
    pos = x >= 0
    z = np.exp(np.where(pos, -x, x))
    return np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))


def sin(x: Tensor) -> Tensor:
    out = np.sin(x.data)

    def bwd(g):
        return ((g * np.cos(x.data)).astype(x.dtype),)

    return make_node("sin", out, (x,), bwd)


def cos(x: Tensor) -> Tensor:
    out = np.cos(x.data)

    def bwd(g):
        return ((-g * np.sin(x.data)).astype(x.dtype),)

    return make_node("cos", out, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):                # non-finite raises in make_node
        out = np.exp(x.data)

    def bwd(g):
        return ((g * out).astype(x.dtype),)

    return make_node("exp", out, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def bwd(g):
        return ((g * 0.5 / out).astype(x.dtype),)

    return make_node("sqrt", out, (x,), bwd)


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)
    with np.errstate(invalid="ignore", over="ignore"):
        out = x.data ** x.data.dtype.type(p)

    def bwd(g):
        return ((g * p * x.data ** x.data.dtype.type(p - 1.0)).astype(x.dtype),)

    return make_node("power", out, (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data.astype(F64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y64 = e / e.sum(axis=axis, keepdims=True)
    out = y64.astype(x.dtype)

    def bwd(g):
        g64 = g.astype(F64)
        dx = y64 * (g64 - (g64 * y64).sum(axis=axis, keepdims=True))
        return (dx.astype(x.dtype),)

    return make_node("softmax", out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError("reshape", f"{x.shape} -> {shape}: {e}") from None

    def bwd(g):
        return (g.reshape(x.data.shape).astype(x.dtype),)

    return make_node("reshape", out, (x,), bwd)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(int(a) for a in axes)
    out = x.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv).astype(x.dtype),)

    return make_node("transpose", out, (x,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat", "no inputs")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        parts = []
        for i, t in enumerate(tensors):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            parts.append(g[tuple(sl)].astype(t.dtype))
        return tuple(parts)

    return make_node("concat", out, tensors, bwd)


def slice_nd(x: Tensor, bounds) -> Tensor:
    """Slice with per-axis (start, stop) pairs; None keeps the full axis."""
    sl = tuple(slice(None) if b is None else slice(int(b[0]), int(b[1]))
               for b in bounds)
    if len(sl) > x.data.ndim:
        raise ShapeError("slice", f"{len(sl)} bounds for ndim {x.data.ndim}")
    out = x.data[sl].copy()

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return make_node("slice", out, (x,), bwd)


def embedding_lookup(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("embedding_lookup", f"table must be 2-D, got {table.shape}")
    if idx.min() < 0 or idx.max() >= table.data.shape[0]:
        raise ShapeError("embedding_lookup", "index out of range")
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return make_node("embedding_lookup", out, (table,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.data.ndim)
    out = x.data.astype(F64).sum(axis=axes, keepdims=keepdims).astype(x.dtype)

    def bwd(g):
        if axes is None:
            return (np.broadcast_to(g, x.data.shape).astype(x.dtype).copy(),)
        gg = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, x.data.shape).astype(x.dtype).copy(),)

    return make_node("sum", np.asarray(out), (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.data.ndim)
    if axes is None:
        n = x.data.size
    else:
        n = int(np.prod([x.data.shape[a] for a in axes]))
    out = (x.data.astype(F64).sum(axis=axes, keepdims=keepdims) / n).astype(x.dtype)

    def bwd(g):
        if axes is None:
            return ((np.broadcast_to(g, x.data.shape) / n).astype(x.dtype),)
        gg = g if keepdims else np.expand_dims(g, axes)
        return ((np.broadcast_to(gg, x.data.shape) / n).astype(x.dtype),)

    return make_node("mean", np.asarray(out), (x,), bwd)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError("mse_loss", f"shapes {a.shape} vs {b.shape}")
    diff = a.data.astype(F64) - b.data.astype(F64)
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=_dt(a, b))

    def bwd(g):
        ga = (2.0 / n) * float(g) * diff
        return ga.astype(a.dtype), (-ga).astype(b.dtype)

    return make_node("mse_loss", out, (a, b), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim not in (2, 3) or bd.ndim not in (2, 3) or ad.ndim != bd.ndim:
        raise ShapeError("matmul", f"supported ranks are 2x2 and 3x3, "
                                   f"got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2] or (ad.ndim == 3 and ad.shape[0] != bd.shape[0]):
        raise ShapeError("matmul", f"incompatible shapes {ad.shape} @ {bd.shape}")
    a64 = ad.astype(F64)
    b64 = bd.astype(F64)
    out = (a64 @ b64).astype(_dt(a, b))

    def bwd(g):
        g64 = g.astype(F64)
        ga = g64 @ b64.swapaxes(-1, -2)
        gb = a64.swapaxes(-1, -2) @ g64
        return ga.astype(a.dtype), gb.astype(b.dtype)

    return make_node("matmul", out, (a, b), bwd)


def _pad_amounts(kh: int, kw: int, padding: str):
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("conv2d", "same padding requires odd kernels")
        return kh // 2, kw // 2
    if padding == "valid":
        return 0, 0
    raise ShapeError("conv2d", f"unknown padding {padding!r}")


def conv2d(x: Tensor, w: Tensor, padding: str = "same") -> Tensor:
    """2-D convolution (cross-correlation), stride 1, NCHW / OIHW layouts."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError("conv2d", f"need 4-D input/kernel, got {xd.shape}, {wd.shape}")
    B, C, H, W = xd.shape
    O, CI, kh, kw = wd.shape
    if CI != C:
        raise ShapeError("conv2d", f"channel mismatch: input {C}, kernel {CI}")
    ph, pw = _pad_amounts(kh, kw, padding)
    if H + 2 * ph < kh or W + 2 * pw < kw:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than padded input")
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    Ho, Wo = H + 2 * ph - kh + 1, W + 2 * pw - kw + 1

    # im2col: (B, C, Ho, Wo, kh, kw) -> (B*Ho*Wo, C*kh*kw), float64 accumulation
    # (materialized straight into float64: one pass instead of copy-then-cast)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols64 = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5),
                                  dtype=F64).reshape(B * Ho * Wo, C * kh * kw)
    wf64 = wd.reshape(O, C * kh * kw).astype(F64)
    out = (cols64 @ wf64.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    out = out.astype(_dt(x, w))

    def bwd(g):
        gf = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O).astype(F64)
        gw = (gf.T @ cols64).reshape(wd.shape)
        gcols = (gf @ wf64).reshape(B, Ho, Wo, C, kh, kw)
        gxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=F64)
        gc = gcols.transpose(0, 3, 1, 2, 4, 5)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + Ho, j:j + Wo] += gc[:, :, :, :, i, j]
        gx = gxp[:, :, ph:ph + H, pw:pw + W] if (ph or pw) else gxp
        return gx.astype(x.dtype), gw.astype(w.dtype)

    return make_node("conv2d", out, (x, w), bwd)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int,
               eps: float = 1e-5) -> Tensor:
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("group_norm", f"need 4-D input, got {xd.shape}")
    B, C, H, W = xd.shape
    if C % groups:
        raise ShapeError("group_norm", f"{C} channels not divisible by {groups} groups")
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeError("group_norm", f"affine params must be ({C},)")
    xg = xd.reshape(B, groups, -1).astype(F64)
    mu = xg.mean(axis=2, keepdims=True)
    var = ((xg - mu) ** 2).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat64 = ((xg - mu) * inv).reshape(B, C, H, W)
    g4 = gamma.data.reshape(1, C, 1, 1).astype(F64)
    b4 = beta.data.reshape(1, C, 1, 1).astype(F64)
    out = (xhat64 * g4 + b4).astype(_dt(x, gamma, beta))

    def bwd(g):
        g64 = g.astype(F64)
        dgamma = (g64 * xhat64).sum(axis=(0, 2, 3))
        dbeta = g64.sum(axis=(0, 2, 3))
        dxhat = (g64 * g4).reshape(B, groups, -1)
        xh = xhat64.reshape(B, groups, -1)
        m1 = dxhat.mean(axis=2, keepdims=True)
        m2 = (dxhat * xh).mean(axis=2, keepdims=True)
        dx = ((dxhat - m1 - xh * m2) * inv).reshape(B, C, H, W)
        return dx.astype(x.dtype), dgamma.astype(gamma.dtype), dbeta.astype(beta.dtype)

    return make_node("group_norm", out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# composites built from the primitives above (no new gradient rules)
# ---------------------------------------------------------------------------

def avg_pool2x(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError("avg_pool2x", f"spatial dims must be even, got {H}x{W}")
    r = reshape(x, (B, C, H // 2, 2, W // 2, 2))
    return mean(r, axis=(3, 5))


def upsample2x(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    r = reshape(x, (B, C, H, 1, W, 1))
    r = concat([r, r], axis=3)
    r = concat([r, r], axis=5)
    return reshape(r, (B, C, 2 * H, 2 * W))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (..., in) @ w (out, in) + b."""
    y = matmul(x, transpose(w))
    if b is not None:
        y = add(y, b)
    return y


# registry keyed by op kind, used by contract tests and the per-op grad suite
OPS = {
    "matmul": matmul,
    "conv2d": conv2d,
    "add": add,
    "mul": mul,
    "scalar_affine": scalar_affine,
    "group_norm": group_norm,
    "silu": silu,
    "softmax": softmax,
    "reshape": reshape,
    "transpose": transpose,
    "mean": mean,
    "sum": sum,
    "mse_loss": mse_loss,
    "concat": concat,
    "slice": slice_nd,
    "embedding_lookup": embedding_lookup,
    "sin": sin,
    "cos": cos,
    "exp": exp,
    "sqrt": sqrt,
    "power": power,
}


def apply_op(op_kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch a forward primitive by its kind name."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ShapeError(op_kind, "unknown op kind") from None
    return fn(*inputs, **attrs)
