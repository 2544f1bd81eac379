"""Block-sequential reconstruction of the quantized model.

Blocks are optimized in forward topological order against full-precision
targets: inputs come from the already-quantized prefix, targets from the FP
model on the same calibration items. The optimized loss is

    L = L_b + gamma * sum_i L_mi + reg

where L_b matches the block output, the L_mi match the front layers (whose
outputs are not part of the block output: conv1/temb_proj in residual blocks,
q/k/v in attention blocks), and reg is the AdaRound rounding regularizer
weight * sum(1 - |2h - 1|^beta) with beta annealed over the run. gamma = 0
degenerates to plain block-wise reconstruction; method "layer_wise" treats
every conv/linear layer as its own block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ndcore import (
    Adam, NotFiniteError, Tensor, backward, mse_loss, mul, no_grad, power,
    scalar_affine, zero_grads,
)
from .ndcore import sum as nd_sum
from .net import BlockSpec, Capture, ModelGraph
from .quant import QuantizedModel, W_HARD, W_SOFT, rect_sigmoid
from .seeds import derive_seed


class ReconError(Exception):
    pass


class ReconDivergence(ReconError):
    def __init__(self, block: str, iteration: int):
        super().__init__(f"non-finite loss in block {block!r} at iteration {iteration}")
        self.block = block
        self.iteration = iteration


METHODS = ("fbr", "block_wise", "layer_wise")


@dataclass
class ReconConfig:
    gamma: float = 1.0
    iters_per_block: int = 2000
    batch: int = 32
    lr_rounding: float = 1e-3
    lr_act_scale: float = 4e-5
    reg_weight: float = 0.01
    beta_range: tuple = (20.0, 2.0)
    method: str = "fbr"
    seed: int = 0

    def effective_gamma(self) -> float:
        return 0.0 if self.method in ("block_wise", "layer_wise") else self.gamma


@dataclass
class BlockLossRecord:
    name: str
    kind: str
    iters: int
    lb_trace: list[float] = field(default_factory=list)
    lmi_traces: dict[str, list] = field(default_factory=dict)   # [(iter, value)]
    reg_trace: list[float] = field(default_factory=list)
    total_trace: list[float] = field(default_factory=list)
    lb_start: float = 0.0
    lb_end: float = 0.0
    warned_nondecreasing: bool = False

    def final_lmi_sum(self) -> float:
        return float(sum(tr[-1][1] for tr in self.lmi_traces.values())) \
            if self.lmi_traces else 0.0

    def summary(self) -> dict:
        return {
            "name": self.name, "kind": self.kind, "iters": self.iters,
            "lb_first": self.lb_trace[0] if self.lb_trace else None,
            "lb_last": self.lb_trace[-1] if self.lb_trace else None,
            "lb_start_full": self.lb_start, "lb_end_full": self.lb_end,
            "lmi_first": {k: v[0][1] for k, v in self.lmi_traces.items()},
            "lmi_last": {k: v[-1][1] for k, v in self.lmi_traces.items()},
            "lmi_sum_last": self.final_lmi_sum(),
            "reg_last": self.reg_trace[-1] if self.reg_trace else None,
            "warned_nondecreasing": self.warned_nondecreasing,
        }


@dataclass
class BlockTargets:
    x_in: np.ndarray                     # block inputs under the quantized prefix
    temb: np.ndarray                     # FP time embedding per item
    o_f: np.ndarray                      # FP block output
    front: dict[str, np.ndarray]         # FP front-layer outputs


class _LayerAsBlock:
    """Adapter for layer-wise reconstruction: one conv/linear layer as a
    block of its own, reconstructed against the layer's FP output."""

    kind = "standalone"

    def __init__(self, layer):
        self.name = layer.name
        self._layer = layer

    def layers(self):
        return [self._layer]

    def spec(self) -> BlockSpec:
        return BlockSpec(self.name, "standalone", [self._layer], [])

    def forward(self, x, temb, ex, cap):
        return ex(self._layer, x)


@dataclass
class _FpTargets:
    temb: np.ndarray
    block_out: dict[str, np.ndarray]
    layer_out: dict[str, np.ndarray]


def _collect_fp(fp_model: ModelGraph, calib, batch: int) -> _FpTargets:
    n = len(calib.t)
    tembs, blocks, layers = [], {}, {}
    for lo in range(0, n, batch):
        hi = min(lo + batch, n)
        cap = Capture(layers=True, blocks=True)
        with no_grad():
            fp_model.forward(calib.x[lo:hi], calib.t[lo:hi], capture=cap)
        tembs.append(cap.temb.data)
        for name, (_, out) in cap.blocks.items():
            blocks.setdefault(name, []).append(out.data)
        for name, (_, out) in cap.layers.items():
            layers.setdefault(name, []).append(out.data)
    return _FpTargets(
        temb=np.concatenate(tembs),
        block_out={k: np.concatenate(v) for k, v in blocks.items()},
        layer_out={k: np.concatenate(v) for k, v in layers.items()})


def _collect_q_inputs(qm: QuantizedModel, calib, unit, batch: int) -> np.ndarray:
    """Inputs to `unit` under the current (partially quantized) model state."""
    n = len(calib.t)
    xs = []
    layer_level = isinstance(unit, _LayerAsBlock)
    for lo in range(0, n, batch):
        hi = min(lo + batch, n)
        cap = Capture(layers=layer_level, blocks=not layer_level)
        with no_grad():
            qm.forward(calib.x[lo:hi], calib.t[lo:hi], capture=cap)
        if layer_level:
            xs.append(cap.layers[unit.name][0].data)
        else:
            xs.append(cap.blocks[unit.name][0].data)
    return np.concatenate(xs)


def _targets_from_fp(fp: _FpTargets, unit, x_in: np.ndarray) -> BlockTargets:
    spec = unit.spec()
    if isinstance(unit, _LayerAsBlock):
        o_f = fp.layer_out[unit.name]
    else:
        o_f = fp.block_out[unit.name]
    return BlockTargets(x_in=x_in, temb=fp.temb, o_f=o_f,
                        front={n: fp.layer_out[n] for n in spec.front_layers})


def block_targets(fp_model: ModelGraph, qm: QuantizedModel, calib, unit,
                  batch: int = 64) -> BlockTargets:
    """Reconstruction inputs/targets for one block: the input side runs the
    partially-quantized model (quantized prefix), the target side the FP
    model, both over the same calibration items."""
    if len(calib.t) == 0:
        raise ReconError("calibration set is empty")
    fp = _collect_fp(fp_model, calib, batch)
    x_in = _collect_q_inputs(qm, calib, unit, batch)
    return _targets_from_fp(fp, unit, x_in)


def _beta_at(cfg: ReconConfig, it: int) -> float:
    hi, lo = cfg.beta_range
    if cfg.iters_per_block <= 1:
        return lo
    return hi + (lo - hi) * (it / (cfg.iters_per_block - 1))


def _feat_size(arr) -> float:
    return float(np.prod(arr.shape[1:], dtype=np.int64))


def _sq_loss(a, b):
    """||a - b||^2 per sample, averaged over the batch (squared L2 of the
    flattened difference, the normalization the rounding-regularizer weight
    is calibrated against)."""
    return scalar_affine(mse_loss(a, b), _feat_size(a.data), 0.0)


def _run_block(qm: QuantizedModel, unit, x_in: Tensor, temb: Tensor,
               want_layers: bool):
    cap = Capture(layers=want_layers) if want_layers else None
    out = unit.forward(x_in, temb, qm.exec_layer, cap)
    return out, (cap.layers if cap else {})


def _mean_block_lb(qm: QuantizedModel, unit, targets: BlockTargets,
                   batch: int) -> float:
    n = targets.x_in.shape[0]
    tot, cnt = 0.0, 0
    with no_grad():
        for lo in range(0, n, batch):
            hi = min(lo + batch, n)
            o_q, _ = _run_block(qm, unit, Tensor(targets.x_in[lo:hi]),
                                Tensor(targets.temb[lo:hi]), False)
            d = o_q.data.astype(np.float64) - targets.o_f[lo:hi].astype(np.float64)
            tot += float((d * d).sum())
            cnt += d.shape[0]
    return tot / cnt


def reconstruct_block(qm: QuantizedModel, unit, targets: BlockTargets,
                      cfg: ReconConfig) -> BlockLossRecord:
    """Optimize one block's rounding vars and activation scales by Adam,
    then harden the rounding to {0,1}."""
    gamma = cfg.effective_gamma()
    spec = unit.spec()
    layer_names = [l.name for l in spec.layers]
    front = spec.front_layers

    rec = BlockLossRecord(name=unit.name, kind=spec.kind,
                          iters=cfg.iters_per_block)
    # baseline: the as-attached state (nearest rounding, initial scales)
    rec.lb_start = _mean_block_lb(qm, unit, targets, cfg.batch)

    alphas, scales = [], []
    for name in layer_names:
        wq, aq = qm.wq[name], qm.aq[name]
        if not wq.passthrough and wq.alpha is not None:
            qm.w_mode[name] = W_SOFT
            wq.alpha.requires_grad = True
            alphas.append(wq.alpha)
        if not aq.passthrough and not bool(aq.degenerate[0]):
            aq.scale.requires_grad = True
            scales.append(aq.scale)
    qm.invalidate()
    if not alphas and not scales:
        rec.lb_end = rec.lb_start
        rec.iters = 0
        return rec

    opt_a = Adam(alphas, lr=cfg.lr_rounding)
    opt_s = Adam(scales, lr=cfg.lr_act_scale)
    rng = np.random.default_rng(derive_seed(cfg.seed, f"recon/{unit.name}"))
    n = targets.x_in.shape[0]
    perm = np.array([], dtype=np.int64)
    lmi_every = max(1, cfg.iters_per_block // 80)

    for it in range(cfg.iters_per_block):
        if perm.size < cfg.batch:
            perm = rng.permutation(n)
        idx, perm = perm[:cfg.batch], perm[cfg.batch:]
        x_in = Tensor(targets.x_in[idx])
        temb = Tensor(targets.temb[idx])
        o_f = Tensor(targets.o_f[idx])
        try:
            want_front = gamma > 0 and bool(front)
            o_q, taps = _run_block(qm, unit, x_in, temb, want_front)
            loss = _sq_loss(o_q, o_f)
            lb_val = loss.item()
            lmi_vals: dict[str, float] = {}
            if want_front:
                for name in front:
                    li = _sq_loss(taps[name][1], Tensor(targets.front[name][idx]))
                    lmi_vals[name] = li.item()
                    loss = loss + scalar_affine(li, gamma, 0.0)
            reg_val = 0.0
            if alphas:
                beta = _beta_at(cfg, it)
                reg = None
                for a in alphas:
                    h = rect_sigmoid(a)
                    d = scalar_affine(h, 2.0, -1.0)
                    term = scalar_affine(power(mul(d, d), beta / 2.0), -1.0, 1.0)
                    tsum = nd_sum(term)
                    reg = tsum if reg is None else reg + tsum
                reg = scalar_affine(reg, cfg.reg_weight, 0.0)
                reg_val = reg.item()
                loss = loss + reg
            total_val = loss.item()
            opt_a.zero_grad()
            opt_s.zero_grad()
            backward(loss)
        except NotFiniteError as e:
            raise ReconDivergence(unit.name, it) from e
        opt_a.step()
        opt_s.step()
        for s in scales:
            # the step size must stay positive
            np.maximum(s.data, 1e-8, out=s.data)
        qm.invalidate()

        rec.lb_trace.append(lb_val)
        rec.reg_trace.append(reg_val)
        rec.total_trace.append(total_val)
        if front and (want_front or it % lmi_every == 0
                      or it == cfg.iters_per_block - 1):
            if not lmi_vals:
                with no_grad():
                    _, taps = _run_block(qm, unit, x_in, temb, True)
                for name in front:
                    lmi_vals[name] = _sq_loss(
                        taps[name][1], Tensor(targets.front[name][idx])).item()
            for name in front:
                rec.lmi_traces.setdefault(name, []).append((it, lmi_vals[name]))

    # harden: binarize rounding, freeze scales, cache dequantized weights
    for name in layer_names:
        qm.w_mode[name] = W_HARD
        if qm.wq[name].alpha is not None:
            qm.wq[name].alpha.requires_grad = False
        qm.aq[name].scale.requires_grad = False
    zero_grads(alphas + scales)
    qm.invalidate()

    rec.lb_end = _mean_block_lb(qm, unit, targets, cfg.batch)
    k = max(1, len(rec.total_trace) // 10)
    if np.mean(rec.total_trace[-k:]) >= np.mean(rec.total_trace[:k]):
        rec.warned_nondecreasing = True
    return rec


def reconstruction_units(qm: QuantizedModel, method: str):
    """Blocks (or single layers, for layer_wise) in forward topological order."""
    if method == "layer_wise":
        return [_LayerAsBlock(l) for l in qm.base.conv_linear_layers()]
    return list(qm.base.blocks)


def reconstruct_model(fp_model: ModelGraph, qm: QuantizedModel, calib,
                      cfg: ReconConfig) -> tuple[QuantizedModel, list[BlockLossRecord]]:
    """Reconstruct all blocks sequentially (the quantized prefix grows as
    each block hardens). Returns the model handle and per-block records."""
    if cfg.method not in METHODS:
        raise ReconError(f"unknown reconstruction method {cfg.method!r}")
    if len(calib.t) == 0:
        raise ReconError("calibration set is empty")
    fp = _collect_fp(fp_model, calib, batch=64)
    records = []
    for unit in reconstruction_units(qm, cfg.method):
        x_in = _collect_q_inputs(qm, calib, unit, batch=64)
        targets = _targets_from_fp(fp, unit, x_in)
        records.append(reconstruct_block(qm, unit, targets, cfg))
    return qm, records


def loss_report(records: list[BlockLossRecord], cfg: ReconConfig) -> dict:
    return {
        "method": cfg.method, "gamma": cfg.effective_gamma(),
        "iters_per_block": cfg.iters_per_block, "batch": cfg.batch,
        "seed": cfg.seed,
        "blocks": [r.summary() for r in records],
    }


def save_iteration_csv(records: list[BlockLossRecord], path):
    """Per-iteration curves for loss-curve plots."""
    import csv
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["block", "iter", "L_b", "reg", "total"])
        for r in records:
            for i, (lb, rg, tot) in enumerate(zip(r.lb_trace, r.reg_trace,
                                                  r.total_trace)):
                w.writerow([r.name, i, f"{lb:.9g}", f"{rg:.9g}", f"{tot:.9g}"])
