"""Forward diffusion, denoiser training, DDIM sampling, trajectory capture.

Schedule math and sampling drivers work on numpy arrays; the graph engine is
only engaged inside model forwards. All randomness comes from explicit
numpy Generators so every run is reproducible from its seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ndcore import Adam, NotFiniteError, Tensor, backward, mse_loss, no_grad
from .net import Capture, ModelGraph


class DiffusionError(Exception):
    pass


class DivergenceError(DiffusionError):
    def __init__(self, iteration: int):
        super().__init__(f"training diverged (non-finite loss) at iteration {iteration}")
        self.iteration = iteration


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    T: int
    betas: np.ndarray        # float64
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray       # posterior std of the ancestral update


def make_schedule(T: int, kind: str = "linear") -> NoiseSchedule:
    """Linear beta ramp 1e-4..0.02 at the reference length 1000, rescaled by
    1000/T so shorter schedules still reach near-pure noise (alpha_bar_T ~ 0)."""
    if T < 2:
        raise DiffusionError(f"schedule needs T >= 2, got {T}")
    if kind != "linear":
        raise DiffusionError(f"unknown schedule kind {kind!r}")
    scale = 1000.0 / T
    betas = np.linspace(1e-4 * scale, 0.02 * scale, T, dtype=np.float64)
    betas = np.clip(betas, 0.0, 0.999)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    sigmas = np.sqrt((1.0 - prev) / (1.0 - alpha_bars) * betas)
    return NoiseSchedule(T, betas, alphas, alpha_bars, sigmas)


def q_sample(x0: np.ndarray, t, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form forward diffusion: sqrt(ab_t)*x0 + sqrt(1-ab_t)*noise."""
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 0) or np.any(t >= sched.T):
        raise DiffusionError(f"t out of range [0, {sched.T})")
    ab = sched.alpha_bars[t].astype(np.float32)
    ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1)) if ab.ndim else ab
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise).astype(x0.dtype)


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

def shapes8x8(rng: np.random.Generator, n: int) -> np.ndarray:
    """Procedural 1x8x8 images (bars / crosses / disks) with values in [-1, 1]."""
    out = np.full((n, 1, 8, 8), -1.0, dtype=np.float32)
    kinds = rng.integers(0, 4, size=n)
    yy, xx = np.mgrid[0:8, 0:8]
    for i in range(n):
        amp = np.float32(0.6 + 0.4 * rng.random())
        k = kinds[i]
        if k == 0:                              # horizontal bar
            r = rng.integers(1, 7)
            out[i, 0, r, :] = amp
        elif k == 1:                            # vertical bar
            c = rng.integers(1, 7)
            out[i, 0, :, c] = amp
        elif k == 2:                            # cross
            r = rng.integers(1, 7)
            c = rng.integers(1, 7)
            out[i, 0, r, :] = amp
            out[i, 0, :, c] = amp
        else:                                   # disk
            cy = 2 + rng.integers(0, 4)
            cx = 2 + rng.integers(0, 4)
            rad = 1.5 + rng.random()
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2
            out[i, 0][mask] = amp
    return out


def moons2d(rng: np.random.Generator, n: int, noise: float = 0.08) -> np.ndarray:
    """Two interleaved half-circles, roughly centered and unit-scaled."""
    n1 = n // 2
    n2 = n - n1
    th1 = rng.random(n1) * np.pi
    th2 = rng.random(n2) * np.pi
    pts = np.concatenate([
        np.stack([np.cos(th1), np.sin(th1)], axis=1),
        np.stack([1.0 - np.cos(th2), 0.5 - np.sin(th2)], axis=1),
    ])
    pts += rng.normal(scale=noise, size=pts.shape)
    pts -= np.array([0.5, 0.25])
    return pts.astype(np.float32)


DATASETS = {"shapes8x8": shapes8x8, "moons2d": moons2d}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_denoiser(model: ModelGraph, dataset: str, sched: NoiseSchedule,
                   iters: int, lr: float = 1e-3, batch: int = 32,
                   seed: int = 0) -> list[float]:
    """Noise-prediction MSE training; returns the per-iteration loss curve."""
    if dataset not in DATASETS:
        raise DiffusionError(f"unknown dataset {dataset!r}")
    gen = DATASETS[dataset]
    rng = np.random.default_rng(seed)
    model.set_trainable(True)
    opt = Adam(model.parameters(), lr=lr)
    curve: list[float] = []
    for it in range(iters):
        x0 = gen(rng, batch)
        t = rng.integers(0, sched.T, size=batch)
        noise = rng.standard_normal(x0.shape).astype(np.float32)
        xt = q_sample(x0, t, noise, sched)
        try:
            pred = model.forward(xt, t)
            loss = mse_loss(pred, Tensor(noise))
            opt.zero_grad()
            backward(loss)
        except NotFiniteError as e:
            raise DivergenceError(it) from e
        opt.step()
        curve.append(loss.item())
    model.set_trainable(False)
    return curve


# ---------------------------------------------------------------------------
# DDIM sampling
# ---------------------------------------------------------------------------

@dataclass
class SamplerConfig:
    kind: str = "ddim"
    steps: int = 100
    eta: float = 0.0
    seed: int = 0


def step_grid(T: int, steps: int) -> list[int]:
    """Uniform-stride sub-sampling of [0, T), ascending."""
    if steps > T:
        raise DiffusionError(f"steps {steps} > schedule length {T}")
    stride = T // steps
    return list(range(0, stride * steps, stride))


def ddim_sigma(sched: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    ab_t = sched.alpha_bars[t]
    ab_p = sched.alpha_bars[t_prev]
    return float(eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t))
                 * np.sqrt(1.0 - ab_t / ab_p))


def ddim_step(model, x_t: np.ndarray, t: int, t_prev: int, eta: float,
              sched: NoiseSchedule, noise: np.ndarray | None = None,
              eps: np.ndarray | None = None) -> np.ndarray:
    """One DDIM update x_t -> x_{t_prev}. `eps` may be supplied by a caller
    that already evaluated the model (trajectory capture)."""
    if t_prev >= t or t_prev < 0:
        raise DiffusionError(f"need t > t_prev >= 0, got {t} -> {t_prev}")
    if eps is None:
        with no_grad():
            eps = model.forward(x_t, t).data
    dt = x_t.dtype
    ab_t = x_t.dtype.type(sched.alpha_bars[t])
    ab_p = x_t.dtype.type(sched.alpha_bars[t_prev])
    sigma = dt.type(ddim_sigma(sched, t, t_prev, eta))
    x0_hat = (x_t - np.sqrt(1.0 - ab_t, dtype=dt) * eps) / np.sqrt(ab_t, dtype=dt)
    out = (np.sqrt(ab_p, dtype=dt) * x0_hat
           + np.sqrt(np.maximum(1.0 - ab_p - sigma * sigma, dt.type(0)), dtype=dt) * eps)
    if eta > 0:
        if noise is None:
            raise DiffusionError("eta > 0 requires a noise draw")
        out = out + sigma * noise.astype(dt)
    return out


def predict_x0(x_t: np.ndarray, eps: np.ndarray, t: int,
               sched: NoiseSchedule) -> np.ndarray:
    dt = x_t.dtype
    ab_t = dt.type(sched.alpha_bars[t])
    return ((x_t - np.sqrt(1.0 - ab_t, dtype=dt) * eps)
            / np.sqrt(ab_t, dtype=dt)).astype(dt)


@dataclass
class StepRecord:
    t: int
    x: np.ndarray          # network input batch at this step
    mid: np.ndarray        # per-sample flattened mid-tap features (B, F)
    F: np.ndarray          # batch-mean feature vector (F,)


@dataclass
class Trajectory:
    records: list[StepRecord]
    x0: np.ndarray
    steps: int
    eta: float
    seed: int
    layer_taps: dict[str, list] = field(default_factory=dict)

    @property
    def features(self) -> np.ndarray:
        """(steps, F) matrix of the per-step batch-mean features."""
        return np.stack([r.F for r in self.records])

    def sample_features(self) -> np.ndarray:
        """(steps, B, F) per-sample features."""
        return np.stack([r.mid for r in self.records])


def run_sampler(model, sched: NoiseSchedule, cfg: SamplerConfig, batch: int,
                shape: tuple | None = None, x_T: np.ndarray | None = None) -> np.ndarray:
    """Plain sampling without capture; returns the generated x0 batch."""
    traj = run_trajectory(model, sched, cfg, batch, shape=shape, x_T=x_T,
                          capture=False)
    return traj.x0


def run_trajectory(model, sched: NoiseSchedule, cfg: SamplerConfig, batch: int,
                   capture_layers: bool = False, shape: tuple | None = None,
                   x_T: np.ndarray | None = None, capture: bool = True) -> Trajectory:
    """One full sampling run of `batch` chains, recording per-step inputs and
    mid-stage features. Capture is observation-only."""
    if cfg.kind != "ddim":
        raise DiffusionError(f"unknown sampler kind {cfg.kind!r}")
    rng = np.random.default_rng(cfg.seed)
    grid = step_grid(sched.T, cfg.steps)
    if x_T is None:
        if shape is None:
            shape = _input_shape(model)
        x = rng.standard_normal((batch,) + shape).astype(np.float32)
    else:
        x = x_T.astype(np.float32).copy()
    records: list[StepRecord] = []
    layer_taps: dict[str, list] = {}
    for i in range(len(grid) - 1, -1, -1):
        t = grid[i]
        cap = Capture(mid=capture, layers=capture_layers) if (capture or capture_layers) else None
        with no_grad():
            eps = model.forward(x, t, capture=cap).data
        if capture:
            mid = cap.mid.data.reshape(batch, -1).copy()
            records.append(StepRecord(t=t, x=x.copy(), mid=mid,
                                      F=mid.mean(axis=0)))
        if capture_layers:
            for name, (lin, lout) in cap.layers.items():
                layer_taps.setdefault(name, []).append((t, lin.data, lout.data))
        if i > 0:
            noise = (rng.standard_normal(x.shape).astype(np.float32)
                     if cfg.eta > 0 else None)
            x = ddim_step(model, x, t, grid[i - 1], cfg.eta, sched,
                          noise=noise, eps=eps)
        else:
            x = predict_x0(x, eps, t, sched)
    return Trajectory(records=records, x0=x, steps=cfg.steps, eta=cfg.eta,
                      seed=cfg.seed, layer_taps=layer_taps)


def _input_shape(model) -> tuple:
    cfg = getattr(model, "config", None) or getattr(model, "base").config
    arch = getattr(model, "arch", None) or getattr(model, "base").arch
    if arch == "tiny_unet":
        return (cfg["in_ch"], cfg["image_size"], cfg["image_size"])
    return (cfg["in_dim"],)


# ---------------------------------------------------------------------------
# trajectory dump (optional external interface)
# ---------------------------------------------------------------------------

def save_trajectory(traj: Trajectory, path, extra_meta: dict | None = None):
    from . import io
    tensors: dict[str, np.ndarray] = {}
    for r in traj.records:
        tensors[f"step{r.t}.x"] = r.x
        tensors[f"step{r.t}.F"] = r.F
        tensors[f"step{r.t}.mid"] = r.mid
    tensors["x0"] = traj.x0
    meta = {"steps": traj.steps, "eta": traj.eta, "seed": traj.seed,
            "ts": [r.t for r in traj.records]}
    meta.update(extra_meta or {})
    io.save_container(path, tensors, meta)


def load_trajectory(path) -> Trajectory:
    from . import io
    tensors, meta = io.load_container(path)
    records = []
    for t in meta["ts"]:
        records.append(StepRecord(t=int(t), x=tensors[f"step{t}.x"],
                                  mid=tensors[f"step{t}.mid"],
                                  F=tensors[f"step{t}.F"]))
    return Trajectory(records=records, x0=tensors["x0"], steps=int(meta["steps"]),
                      eta=float(meta["eta"]), seed=int(meta["seed"]))
