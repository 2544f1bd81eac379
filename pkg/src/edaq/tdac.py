"""Timestep scoring and calibration budget allocation.

From the per-step feature vectors F_t of a profiling run:

    D_t = |{ F_i : mse(F_t, F_i) < eps }|          (density, counts itself)
    V_t = sum_i (1 - cos_sim(F_t, F_i))            (variety)
    S_t = minmax(D)_t + lambda * minmax(V)_t
    X_t = S_t / sum(S) * N, integerized by largest-remainder apportionment

The X_t samples for step t are drawn uniformly (seeded, without replacement)
from that step's profiling batch. Baseline strategies (equal-spaced, normal
density, random, single-step) share the same drawing machinery.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .diffuse import Trajectory


class TdacError(Exception):
    pass


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------

def pairwise_mse(F: np.ndarray) -> np.ndarray:
    F64 = F.astype(np.float64)
    diff = F64[:, None, :] - F64[None, :, :]
    return (diff * diff).mean(axis=2)


def density_scores(F: np.ndarray, epsilon: float) -> np.ndarray:
    """D_t = number of steps whose feature map is within eps (mse) of F_t;
    includes i = t, so every count is at least 1."""
    if epsilon <= 0:
        raise TdacError(f"epsilon must be positive, got {epsilon}")
    if len(F) < 1:
        raise TdacError("need at least one feature vector")
    return (pairwise_mse(F) < epsilon).sum(axis=1).astype(np.int64)


def cosine_similarity_matrix(F: np.ndarray) -> np.ndarray:
    F64 = F.astype(np.float64)
    norms = np.linalg.norm(F64, axis=1)
    sim = F64 @ F64.T
    denom = norms[:, None] * norms[None, :]
    # cosine similarity with a zero vector is defined as 0
    out = np.divide(sim, denom, out=np.zeros_like(sim), where=denom > 0)
    return out


def variety_scores(F: np.ndarray) -> np.ndarray:
    """V_t = sum_i (1 - cos_sim(F_t, F_i))."""
    sim = cosine_similarity_matrix(F)
    return (1.0 - sim).sum(axis=1)


def min_max_scale(scores: np.ndarray) -> tuple[np.ndarray, bool]:
    """(v - min) / (max - min); a constant vector maps to all zeros and sets
    the degenerate flag."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise TdacError("empty score vector")
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.zeros_like(s), True
    return (s - lo) / (hi - lo), False


def default_epsilon(F: np.ndarray) -> float:
    """25th percentile of the off-diagonal pairwise mse values."""
    m = pairwise_mse(F)
    off = m[~np.eye(len(F), dtype=bool)]
    if off.size == 0:
        return 1.0
    eps = float(np.percentile(off, 25.0))
    return eps if eps > 0 else float(off[off > 0].min(initial=1.0))


# ---------------------------------------------------------------------------
# allocation
# ---------------------------------------------------------------------------

def allocate(S: np.ndarray, N: int) -> np.ndarray:
    """Largest-remainder apportionment of N over raw shares S_t/sum(S)*N.

    Remainder units go to the largest fractional parts, ties to the smaller
    index. A zero score vector falls back to uniform shares.
    """
    if N < 1:
        raise TdacError(f"budget must be >= 1, got {N}")
    S = np.asarray(S, dtype=np.float64)
    if np.any(S < 0):
        raise TdacError("scores must be non-negative")
    total = S.sum()
    raw = np.full(len(S), N / len(S)) if total == 0 else S / total * N
    base = np.floor(raw).astype(np.int64)
    rem = int(N - base.sum())
    frac = raw - np.floor(raw)
    order = np.lexsort((np.arange(len(S)), -frac))
    X = base.copy()
    for i in order[:rem]:
        X[i] += 1
    return X


# ---------------------------------------------------------------------------
# calibration sets
# ---------------------------------------------------------------------------

@dataclass
class ScoreTable:
    t: np.ndarray
    D: np.ndarray
    V: np.ndarray
    D_hat: np.ndarray
    V_hat: np.ndarray
    S: np.ndarray
    X: np.ndarray
    epsilon: float
    lam: float
    N: int
    seed: int
    degenerate_D: bool = False
    degenerate_V: bool = False

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t", "D", "V", "D_hat", "V_hat", "S", "X"])
            for i in range(len(self.t)):
                w.writerow([int(self.t[i]), int(self.D[i]), f"{self.V[i]:.9g}",
                            f"{self.D_hat[i]:.9g}", f"{self.V_hat[i]:.9g}",
                            f"{self.S[i]:.9g}", int(self.X[i])])

    def sidecar(self) -> dict:
        return {"epsilon": self.epsilon, "lambda": self.lam, "N": self.N,
                "seed": self.seed, "degenerate_D": self.degenerate_D,
                "degenerate_V": self.degenerate_V}

    def save_sidecar(self, path):
        with open(path, "w") as f:
            json.dump(self.sidecar(), f, sort_keys=True, indent=2)


@dataclass
class CalibrationSet:
    x: np.ndarray            # (N, ...) model inputs
    t: np.ndarray            # (N,) timesteps
    provenance: str
    step_row: np.ndarray = field(default=None)   # trajectory record index
    batch_col: np.ndarray = field(default=None)  # index within the step batch
    params: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)


def _draw(traj: Trajectory, counts: np.ndarray, provenance: str, seed: int,
          params: dict) -> CalibrationSet:
    """Draw counts[i] samples (uniform, no replacement) from record i's batch."""
    rng = np.random.default_rng(seed)
    xs, ts, rows, cols = [], [], [], []
    for i, rec in enumerate(traj.records):
        c = int(counts[i])
        if c == 0:
            continue
        B = rec.x.shape[0]
        if c > B:
            raise TdacError(
                f"allocation {c} at step t={rec.t} exceeds the profiling batch "
                f"({B}); rerun the profile with a larger batch")
        idx = np.sort(rng.choice(B, size=c, replace=False))
        xs.append(rec.x[idx])
        ts.append(np.full(c, rec.t, dtype=np.int64))
        rows.append(np.full(c, i, dtype=np.int64))
        cols.append(idx.astype(np.int64))
    return CalibrationSet(x=np.concatenate(xs), t=np.concatenate(ts),
                          provenance=provenance,
                          step_row=np.concatenate(rows),
                          batch_col=np.concatenate(cols), params=params)


def build_tdac(traj: Trajectory, epsilon: float | None, lam: float, N: int,
               seed: int) -> tuple[ScoreTable, CalibrationSet]:
    """Score the trajectory's steps and draw the calibration set (density +
    variety -> min-max -> combine -> apportion -> draw). Table rows and the
    apportionment tie-break run in ascending-t order."""
    ts_rec = np.array([r.t for r in traj.records], dtype=np.int64)
    order = np.argsort(ts_rec)                 # ascending t
    F = traj.features[order]
    if epsilon is None:
        epsilon = default_epsilon(F)
    D = density_scores(F, epsilon)
    V = variety_scores(F)
    D_hat, deg_d = min_max_scale(D)
    V_hat, deg_v = min_max_scale(V)
    S = D_hat + lam * V_hat
    X = allocate(S, N)
    table = ScoreTable(t=ts_rec[order], D=D, V=V, D_hat=D_hat, V_hat=V_hat,
                       S=S, X=X, epsilon=float(epsilon), lam=float(lam),
                       N=int(N), seed=int(seed), degenerate_D=deg_d,
                       degenerate_V=deg_v)
    counts_rec = np.zeros(len(ts_rec), dtype=np.int64)
    counts_rec[order] = X
    calib = _draw(traj, counts_rec, "tdac", seed,
                  {"epsilon": float(epsilon), "lambda": float(lam), "N": int(N)})
    return table, calib


STRATEGIES = ("tdac", "equal_spaced", "normal_density", "random", "single_step")


def baseline_calibration(traj: Trajectory, strategy: str, N: int, seed: int,
                         step_t: int | None = None) -> CalibrationSet:
    """Non-TDAC sampling strategies over the same profiling trajectory."""
    K = len(traj.records)
    ts_rec = np.array([r.t for r in traj.records], dtype=np.int64)
    order = np.argsort(ts_rec)                 # ascending t, ties to smaller t
    ts = ts_rec[order]
    if strategy == "equal_spaced":
        counts = allocate(np.ones(K), N)
    elif strategy == "normal_density":
        # per-step counts proportional to a normal over t: mean 0.4*T, std 0.4*T
        T = max(int(ts.max()) + 1, 1)
        mu, sd = 0.4 * T, 0.4 * T
        dens = np.exp(-0.5 * ((ts - mu) / sd) ** 2)
        counts = allocate(dens, N)
    elif strategy == "random":
        rng = np.random.default_rng(seed)
        picks = rng.integers(0, K, size=N)
        counts = np.bincount(picks, minlength=K)
    elif strategy == "single_step":
        if step_t is None:
            step_t = int(ts.min())
        counts = np.zeros(K, dtype=np.int64)
        match = np.nonzero(ts == step_t)[0]
        if match.size == 0:
            raise TdacError(f"no trajectory record at t={step_t}")
        counts[match[0]] = N
    else:
        raise TdacError(f"unknown strategy {strategy!r}")
    counts_rec = np.zeros(K, dtype=np.int64)
    counts_rec[order] = counts
    params = {"N": int(N)} if step_t is None else {"N": int(N), "t": int(step_t)}
    return _draw(traj, counts_rec, strategy, seed, params)


def save_calibration(calib: CalibrationSet, path, extra_meta: dict | None = None):
    from . import io
    meta = {"provenance": calib.provenance, "params": calib.params}
    meta.update(extra_meta or {})
    io.save_container(path, {
        "calib.x": calib.x,
        "calib.t": calib.t.astype(np.float32),
        "calib.step_row": calib.step_row.astype(np.float32),
        "calib.batch_col": calib.batch_col.astype(np.float32),
    }, meta)


def load_calibration(path) -> CalibrationSet:
    from . import io
    tensors, meta = io.load_container(path)
    return CalibrationSet(
        x=tensors["calib.x"], t=tensors["calib.t"].astype(np.int64),
        provenance=meta["provenance"],
        step_row=tensors["calib.step_row"].astype(np.int64),
        batch_col=tensors["calib.batch_col"].astype(np.int64),
        params=meta.get("params", {}))
