"""Compression accounting, generation-fidelity proxies, diagnostic curves.

Compression follows the convention of per-module op counters: MACs are
tallied for conv/linear layers only (functional attention matmuls and norms
are not counted), each quantized layer's parameters (bias included) count at
the weight bit-width, unquantized modules (norm affines, the time-embed MLP)
at 32 bits, plus per-channel scale (f32) and zero-point (u8) overhead.

Fidelity uses a Frechet distance between Gaussian fits of sample sets in a
fixed feature space (flattened pixels / raw coordinates); all comparisons in
the acceptance suite are paired (method A vs method B under the same proxy).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffuse import (NoiseSchedule, SamplerConfig, Trajectory, ddim_step,
                      predict_x0, step_grid)
from .ndcore import no_grad
from .net import Capture, ModelGraph


# ---------------------------------------------------------------------------
# compression accounting
# ---------------------------------------------------------------------------

@dataclass
class LayerCost:
    name: str
    kind: str
    macs: int
    params: int
    out_channels: int
    bits_w: int
    bits_a: int
    quantized: bool


@dataclass
class CompressionReport:
    layers: list[LayerCost]
    fp_params: int                    # norm affines + time-embed MLP
    fp_macs: int                      # time-embed MLP
    bits_w: int
    bits_a: int
    bops: float = 0.0
    bops_fp32: float = 0.0
    size_bytes: float = 0.0
    size_bytes_fp32: float = 0.0
    bops_ratio: float = 0.0
    size_ratio: float = 0.0
    bops_ratio_quantized_subset: float = 0.0

    def totals(self):
        q_macs = sum(l.macs for l in self.layers)
        q_params = sum(l.params for l in self.layers)
        channels = sum(l.out_channels for l in self.layers)
        self.bops = (sum(l.macs * l.bits_w * l.bits_a for l in self.layers)
                     + self.fp_macs * 32 * 32)
        self.bops_fp32 = (q_macs + self.fp_macs) * 32 * 32
        # pass-through sentinels attach no quantizer parameters
        overhead = ((channels * (4 + 1) if self.bits_w < 32 else 0)
                    + (len(self.layers) * (4 + 1) if self.bits_a < 32 else 0))
        self.size_bytes = (sum(l.params * l.bits_w for l in self.layers) / 8.0
                           + overhead + self.fp_params * 4.0)
        self.size_bytes_fp32 = (q_params + self.fp_params) * 4.0
        self.bops_ratio = self.bops_fp32 / self.bops
        self.size_ratio = self.size_bytes_fp32 / self.size_bytes
        q_bops = sum(l.macs * l.bits_w * l.bits_a for l in self.layers)
        self.bops_ratio_quantized_subset = (q_macs * 32 * 32) / q_bops
        return self

    def to_dict(self) -> dict:
        return {
            "bits_w": self.bits_w, "bits_a": self.bits_a,
            "bops": self.bops, "bops_fp32": self.bops_fp32,
            "bops_ratio": self.bops_ratio,
            "bops_ratio_quantized_subset": self.bops_ratio_quantized_subset,
            "size_bytes": self.size_bytes,
            "size_bytes_fp32": self.size_bytes_fp32,
            "size_ratio": self.size_ratio,
            "fp_params": self.fp_params, "fp_macs": self.fp_macs,
            "layers": [{"name": l.name, "kind": l.kind, "macs": l.macs,
                        "params": l.params, "bits_w": l.bits_w,
                        "bits_a": l.bits_a} for l in self.layers],
        }


def _layer_shapes(model: ModelGraph) -> dict[str, tuple]:
    """Output spatial sizes per layer, traced on a single zero sample."""
    cap = Capture(layers=True)
    shape = ((model.config["in_ch"], model.config["image_size"],
              model.config["image_size"]) if model.arch == "tiny_unet"
             else (model.config["in_dim"],))
    with no_grad():
        model.forward(np.zeros((1,) + shape, dtype=np.float32), 0, capture=cap)
    return {name: out.shape for name, (_, out) in cap.layers.items()}


def count_compression(model: ModelGraph, bits_w: int, bits_a: int) -> CompressionReport:
    """Analytic MACs/size ledger for one denoising step (batch 1)."""
    shapes = _layer_shapes(model)
    layers = []
    for l in model.conv_linear_layers():
        w = l.weight.data
        params = int(w.size + (l.bias.size if l.bias is not None else 0))
        if l.kind == "conv":
            _, _, ho, wo = shapes[l.name]
            macs = ho * wo * int(w.size)
        else:
            macs = int(w.size)
        layers.append(LayerCost(l.name, l.kind, macs, params,
                                int(w.shape[0]), bits_w, bits_a, True))
    named = model.named_tensors()
    quantized_names = set()
    for l in model.conv_linear_layers():
        quantized_names.add(f"{l.name}.weight")
        quantized_names.add(f"{l.name}.bias")
    fp_params = int(sum(t.size for n, t in named.items()
                        if n not in quantized_names))
    te = model.time_embed
    fp_macs = int(te.fc1.weight.size + te.fc2.weight.size)
    return CompressionReport(layers=layers, fp_params=fp_params,
                             fp_macs=fp_macs, bits_w=bits_w,
                             bits_a=bits_a).totals()


# ---------------------------------------------------------------------------
# teacher-forced per-step output error
# ---------------------------------------------------------------------------

def trajectory_mse(fp_model, q_model, sched: NoiseSchedule, cfg: SamplerConfig,
                   batch: int, shape: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Per-step mean ||eps_fp - eps_q||^2 along the FP trajectory (both models
    evaluated on the same FP states). Returns (ts, curve) in sampling order."""
    rng = np.random.default_rng(cfg.seed)
    grid = step_grid(sched.T, cfg.steps)
    x = rng.standard_normal((batch,) + shape).astype(np.float32)
    ts, curve = [], []
    for i in range(len(grid) - 1, -1, -1):
        t = grid[i]
        with no_grad():
            eps_fp = fp_model.forward(x, t).data
            eps_q = q_model.forward(x, t).data
        d = eps_fp.astype(np.float64) - eps_q.astype(np.float64)
        ts.append(t)
        curve.append(float((d * d).mean()))
        if i > 0:
            noise = (rng.standard_normal(x.shape).astype(np.float32)
                     if cfg.eta > 0 else None)
            x = ddim_step(fp_model, x, t, grid[i - 1], cfg.eta, sched,
                          noise=noise, eps=eps_fp)
        else:
            x = predict_x0(x, eps_fp, t, sched)
    return np.array(ts), np.array(curve)


def curve_auc(curve: np.ndarray) -> float:
    """Area under a per-step curve, normalized to the per-step mean."""
    return float(np.mean(curve))


# ---------------------------------------------------------------------------
# Frechet proxy
# ---------------------------------------------------------------------------

def gaussian_frechet(mu_a, cov_a, mu_b, cov_b) -> float:
    """Frechet distance between two Gaussians; the matrix square root uses
    eigendecomposition with negative eigenvalues clipped at 0."""
    mu_a = np.asarray(mu_a, dtype=np.float64)
    mu_b = np.asarray(mu_b, dtype=np.float64)
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    diff = mu_a - mu_b
    sa = _sqrtm_psd(cov_a)
    inner = sa @ cov_b @ sa
    tr_cross = np.sqrt(np.clip(np.linalg.eigvalsh((inner + inner.T) / 2.0),
                               0.0, None)).sum()
    val = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)
    return max(val, 0.0)


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fit_gaussian(samples: np.ndarray, ridge: float = 0.0):
    x = samples.reshape(samples.shape[0], -1).astype(np.float64)
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False)
    cov = np.atleast_2d(cov)
    if ridge > 0:
        cov = cov + ridge * np.eye(cov.shape[0])
    return mu, cov


def frechet_proxy(set_a: np.ndarray, set_b: np.ndarray,
                  min_samples: int = 256) -> float:
    """Frechet distance between Gaussian fits of two sample sets (features are
    the flattened samples). Rank-deficient fits get a 1e-6 shrinkage ridge."""
    info = frechet_proxy_report(set_a, set_b, min_samples)
    return info["value"]


def frechet_proxy_report(set_a: np.ndarray, set_b: np.ndarray,
                         min_samples: int = 256) -> dict:
    a = set_a.reshape(set_a.shape[0], -1)
    b = set_b.reshape(set_b.shape[0], -1)
    dim = a.shape[1]
    deficient = a.shape[0] <= dim or b.shape[0] <= dim
    ridge = 1e-6 if deficient else 0.0
    mu_a, cov_a = fit_gaussian(a, ridge)
    mu_b, cov_b = fit_gaussian(b, ridge)
    return {"value": gaussian_frechet(mu_a, cov_a, mu_b, cov_b),
            "rank_deficient": bool(deficient),
            "n_a": int(a.shape[0]), "n_b": int(b.shape[0]), "dim": int(dim),
            "enough_samples": bool(min(a.shape[0], b.shape[0]) >= min_samples)}


# ---------------------------------------------------------------------------
# challenge diagnostics (sample-difference curve, center-distance histograms)
# ---------------------------------------------------------------------------

def wasserstein_1d(a: np.ndarray, b: np.ndarray) -> float:
    """1-Wasserstein distance between two empirical distributions."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    grid = np.concatenate([a, b])
    grid.sort(kind="mergesort")
    widths = np.diff(grid)
    if widths.size == 0:
        return 0.0
    cdf_a = np.searchsorted(a, grid[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * widths))


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    if np.array_equal(u, v):
        return 0.0
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 1.0
    return float(1.0 - np.dot(u, v) / (nu * nv))


@dataclass
class Diagnostics:
    ts: np.ndarray
    dif_curve: np.ndarray
    dif_avg: float
    dif_range: float
    center_dists_overall: np.ndarray
    center_dists_per_strategy: dict[str, np.ndarray] = field(default_factory=dict)
    wasserstein_to_overall: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"ts": self.ts.tolist(),
                "dif_curve": [float(v) for v in self.dif_curve],
                "dif_avg": self.dif_avg, "dif_range": self.dif_range,
                "wasserstein_to_overall": {k: float(v) for k, v in
                                           self.wasserstein_to_overall.items()}}


def challenge_diagnostics(traj: Trajectory, calib_sets: dict | None = None) -> Diagnostics:
    """Per-step adjacent-feature cosine differences (the sample-difference
    curve) plus distance-to-center histograms per calibration strategy,
    compared against the overall sample distribution by 1-Wasserstein."""
    F = traj.features.astype(np.float64)
    K = len(F)
    dif = np.zeros(K)
    for i in range(K):
        ds = []
        if i > 0:
            ds.append(cosine_distance(F[i], F[i - 1]))
        if i < K - 1:
            ds.append(cosine_distance(F[i], F[i + 1]))
        dif[i] = np.mean(ds) if ds else 0.0
    feats = traj.sample_features().astype(np.float64)   # (K, B, Fdim)
    flat = feats.reshape(-1, feats.shape[-1])
    center = flat.mean(axis=0)
    overall = np.linalg.norm(flat - center, axis=1)
    diag = Diagnostics(
        ts=np.array([r.t for r in traj.records]),
        dif_curve=dif, dif_avg=float(dif.mean()),
        dif_range=float(dif.max() - dif.min()),
        center_dists_overall=overall)
    for name, calib in (calib_sets or {}).items():
        sel = feats[calib.step_row, calib.batch_col]
        dists = np.linalg.norm(sel - center, axis=1)
        diag.center_dists_per_strategy[name] = dists
        diag.wasserstein_to_overall[name] = wasserstein_1d(dists, overall)
    return diag
