"""Command-line pipeline: train | profile | calibrate | quantize | sample |
evaluate | ablate | report.

Every command is a pure function of (resolved config, input artifacts, seed):
rerunning reproduces outputs bit-identically. The fully-resolved config is
echoed into every artifact. Config precedence: built-in defaults < config
file (key=value lines) < command-line flags. All randomness derives from the
root --seed through named streams, so stages are independently reproducible.
"""

import os

if os.environ.get("EDAQ_THREADS"):
    # must happen before numpy loads its BLAS
    os.environ.setdefault("OMP_NUM_THREADS", os.environ["EDAQ_THREADS"])
    os.environ.setdefault("OPENBLAS_NUM_THREADS", os.environ["EDAQ_THREADS"])

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import diffuse, fbr, metrics, net, quant, tdac
from .seeds import derive_seed


class CliError(Exception):
    pass


@dataclass
class RunConfig:
    arch: str = "tiny_unet"
    dataset: str = "shapes8x8"
    T: int = 100
    steps: int = 100
    eta: float = 0.0
    bits_w: int = 4
    bits_a: int = 8
    epsilon: float = -1.0          # <= 0 means the data-relative default
    lam: float = 1.0
    gamma: float = 1.0
    calib_size: int = 1024
    strategy: str = "tdac"
    step_t: int = 0                # single_step strategy parameter
    recon: str = "fbr"
    iters: int = 2000
    train_iters: int = 2000
    batch: int = 32
    profile_batch: int = 64
    sample_batch: int = 256
    lr: float = 1e-3
    seed: int = 0
    out: str = "runs/run0"

    def epsilon_or_none(self):
        return None if self.epsilon <= 0 else float(self.epsilon)


_FLOAT_FIELDS = {f.name for f in fields(RunConfig) if f.type in (float, "float")}
_INT_FIELDS = {f.name for f in fields(RunConfig) if f.type in (int, "int")}


def _coerce(name: str, value: str):
    if name in _FLOAT_FIELDS:
        return float(value)
    if name in _INT_FIELDS:
        return int(value)
    return value


def load_config_file(path) -> dict:
    out = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{ln}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        k = k.replace("-", "_")
        if k == "lambda":
            k = "lam"
        if k not in {f.name for f in fields(RunConfig)}:
            raise CliError(f"{path}:{ln}: unknown config key {k!r}")
        out[k] = _coerce(k, v)
    return out


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for k, v in load_config_file(args.config).items():
            setattr(cfg, k, v)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            setattr(cfg, f.name, v)
    return cfg


def _outdir(cfg: RunConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
    return str(path)


def _require(path, what: str, producer: str):
    if path is None or not Path(path).exists():
        raise CliError(f"missing {what}: {path!r} (produce it with `edaq {producer}`)")
    return path


def _load_model(path, what="model", producer="train"):
    _require(path, what, producer)
    model, extra, meta = net.load_checkpoint(path)
    if "quant" in meta:
        return quant.restore_quantized(model, extra, meta), model, meta
    return model, model, meta


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> dict:
    out = _outdir(cfg)
    model = net.build_model(cfg.arch, seed=derive_seed(cfg.seed, "init"))
    sched = diffuse.make_schedule(cfg.T)
    curve = diffuse.train_denoiser(model, cfg.dataset, sched, cfg.train_iters,
                                   lr=cfg.lr, batch=cfg.batch,
                                   seed=derive_seed(cfg.seed, "train"))
    tail = curve[-max(1, len(curve) // 20):] if curve else [float("nan")]
    train_meta = {"dataset": cfg.dataset, "iters": cfg.train_iters,
                  "final_loss": float(np.mean(tail)),
                  "loss_threshold": float(np.mean(tail)) * 1.5}
    ckpt = out / "model_fp.edaq"
    net.save_checkpoint(model, ckpt, extra_meta={"run_config": asdict(cfg),
                                                 "train": train_meta})
    log = _write_json(out / "train_log.json",
                      {"config": asdict(cfg), "train": train_meta,
                       "curve_every_10": curve[::10]})
    return {"checkpoint": str(ckpt), "log": log}


def cmd_profile(cfg: RunConfig, model_path) -> dict:
    out = _outdir(cfg)
    model, _, _ = _load_model(model_path)
    sched = diffuse.make_schedule(cfg.T)
    scfg = diffuse.SamplerConfig(steps=cfg.steps, eta=cfg.eta,
                                 seed=derive_seed(cfg.seed, "profile"))
    traj = diffuse.run_trajectory(model, sched, scfg, batch=cfg.profile_batch)
    tpath = out / "trajectory.edaq"
    diffuse.save_trajectory(traj, tpath, extra_meta={"run_config": asdict(cfg)})
    diag = metrics.challenge_diagnostics(traj)
    dpath = _write_json(out / "diagnostics.json",
                        {"config": asdict(cfg), **diag.to_dict()})
    with open(out / "dif_curve.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "dif"])
        for t, v in zip(diag.ts, diag.dif_curve):
            w.writerow([int(t), f"{v:.9g}"])
    return {"trajectory": str(tpath), "diagnostics": dpath}


def cmd_calibrate(cfg: RunConfig, traj_path) -> dict:
    out = _outdir(cfg)
    _require(traj_path, "trajectory", "profile")
    traj = diffuse.load_trajectory(traj_path)
    if cfg.calib_size > traj.records[0].x.shape[0] * len(traj.records):
        raise CliError(f"calib-size {cfg.calib_size} exceeds profiled samples "
                       f"({traj.records[0].x.shape[0]} x {len(traj.records)}); "
                       f"rerun `edaq profile` with a larger batch")
    seed = derive_seed(cfg.seed, "calib-draw")
    result = {}
    if cfg.strategy == "tdac":
        table, calib = tdac.build_tdac(traj, cfg.epsilon_or_none(), cfg.lam,
                                       cfg.calib_size, seed)
        table.save_csv(out / "score_table.csv")
        table.save_sidecar(out / "score_table.json")
        result["score_table"] = str(out / "score_table.csv")
    else:
        step_t = cfg.step_t if cfg.strategy == "single_step" else None
        calib = tdac.baseline_calibration(traj, cfg.strategy, cfg.calib_size,
                                          seed, step_t=step_t)
    cpath = out / "calibration.edaq"
    tdac.save_calibration(calib, cpath, extra_meta={"run_config": asdict(cfg)})
    result["calibration"] = str(cpath)
    return result


def cmd_quantize(cfg: RunConfig, model_path, calib_path, iter_csv=False) -> dict:
    out = _outdir(cfg)
    model, _, _ = _load_model(model_path)
    if isinstance(model, quant.QuantizedModel):
        raise CliError("quantize expects a full-precision checkpoint")
    _require(calib_path, "calibration set", "calibrate")
    calib = tdac.load_calibration(calib_path)
    qm = quant.attach_quantizers(model, cfg.bits_w, cfg.bits_a, calib)
    rcfg = fbr.ReconConfig(gamma=cfg.gamma, iters_per_block=cfg.iters,
                           batch=cfg.batch, method=cfg.recon,
                           seed=derive_seed(cfg.seed, "recon"))
    qm, records = fbr.reconstruct_model(model, qm, calib, rcfg)
    ckpt = out / "model_wq.edaq"
    net.save_checkpoint(model, ckpt, extra_tensors=qm.state_tensors(),
                        extra_meta={**qm.state_meta(),
                                    "run_config": asdict(cfg),
                                    "calibration": calib.provenance})
    report = fbr.loss_report(records, rcfg)
    report["config"] = asdict(cfg)
    rpath = _write_json(out / "recon_report.json", report)
    result = {"checkpoint": str(ckpt), "report": rpath}
    if iter_csv:
        fbr.save_iteration_csv(records, out / "recon_iters.csv")
        result["iterations"] = str(out / "recon_iters.csv")
    return result


def cmd_sample(cfg: RunConfig, model_path) -> dict:
    out = _outdir(cfg)
    model, _, _ = _load_model(model_path, what="model", producer="train|quantize")
    sched = diffuse.make_schedule(cfg.T)
    scfg = diffuse.SamplerConfig(steps=cfg.steps, eta=cfg.eta,
                                 seed=derive_seed(cfg.seed, "sample"))
    x0 = diffuse.run_sampler(model, sched, scfg, batch=cfg.sample_batch)
    from . import io
    spath = out / "samples.edaq"
    io.save_container(spath, {"samples.x0": x0},
                      {"run_config": asdict(cfg), "count": int(x0.shape[0])})
    return {"samples": str(spath)}


def _sample_set(model, cfg: RunConfig, sched, seed) -> np.ndarray:
    scfg = diffuse.SamplerConfig(steps=cfg.steps, eta=cfg.eta, seed=seed)
    return diffuse.run_sampler(model, sched, scfg, batch=cfg.sample_batch)


def cmd_evaluate(cfg: RunConfig, fp_path, wq_path) -> dict:
    out = _outdir(cfg)
    fp_model, _, _ = _load_model(fp_path, what="FP checkpoint", producer="train")
    wq_model, base, meta = _load_model(wq_path, what="quantized checkpoint",
                                       producer="quantize")
    sched = diffuse.make_schedule(cfg.T)
    shape = ((base.config["in_ch"], base.config["image_size"],
              base.config["image_size"]) if base.arch == "tiny_unet"
             else (base.config["in_dim"],))

    tcfg = diffuse.SamplerConfig(steps=cfg.steps, eta=cfg.eta,
                                 seed=derive_seed(cfg.seed, "eval-traj"))
    ts, curve = metrics.trajectory_mse(fp_model, wq_model, sched, tcfg,
                                       batch=min(32, cfg.sample_batch),
                                       shape=shape)
    with open(out / "traj_mse.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "mse"])
        for t, v in zip(ts, curve):
            w.writerow([int(t), f"{v:.9g}"])

    fp_set = _sample_set(fp_model, cfg, sched, derive_seed(cfg.seed, "eval-sample"))
    wq_set = _sample_set(wq_model, cfg, sched, derive_seed(cfg.seed, "eval-sample"))
    rng = np.random.default_rng(derive_seed(cfg.seed, "eval-data"))
    data = diffuse.DATASETS[cfg.dataset](rng, cfg.sample_batch)
    fidelity = {
        "config": asdict(cfg),
        "traj_mse_auc": metrics.curve_auc(curve),
        "frechet_fp_vs_wq": metrics.frechet_proxy_report(fp_set, wq_set),
        "frechet_fp_vs_data": metrics.frechet_proxy_report(fp_set, data),
        "frechet_wq_vs_data": metrics.frechet_proxy_report(wq_set, data),
    }
    fpath = _write_json(out / "fidelity.json", fidelity)
    bits = meta.get("quant", {"bits_w": cfg.bits_w, "bits_a": cfg.bits_a})
    comp = metrics.count_compression(base, int(bits["bits_w"]), int(bits["bits_a"]))
    cpath = _write_json(out / "compression.json",
                        {"config": asdict(cfg), **comp.to_dict()})
    return {"fidelity": fpath, "compression": cpath,
            "traj_mse": str(out / "traj_mse.csv")}


def cmd_ablate(cfg: RunConfig, model_path, seeds: list[int]) -> dict:
    """Paired grid over {calibration strategy} x {reconstruction method},
    evaluated per seed with shared profiles and sample draws."""
    out = _outdir(cfg)
    fp_model, _, _ = _load_model(model_path)
    sched = diffuse.make_schedule(cfg.T)
    strategies = ["tdac", "equal_spaced"]
    methods = ["fbr", "block_wise"]
    cells: dict[str, dict] = {}
    for seed in seeds:
        scfg = diffuse.SamplerConfig(steps=cfg.steps, eta=cfg.eta,
                                     seed=derive_seed(seed, "profile"))
        traj = diffuse.run_trajectory(fp_model, sched, scfg,
                                      batch=cfg.profile_batch)
        fp_set = _sample_set(fp_model, cfg, sched, derive_seed(seed, "eval-sample"))
        for strat in strategies:
            if strat == "tdac":
                _, calib = tdac.build_tdac(traj, cfg.epsilon_or_none(), cfg.lam,
                                           cfg.calib_size,
                                           derive_seed(seed, "calib-draw"))
            else:
                calib = tdac.baseline_calibration(traj, strat, cfg.calib_size,
                                                  derive_seed(seed, "calib-draw"))
            for method in methods:
                qm = quant.attach_quantizers(fp_model, cfg.bits_w, cfg.bits_a,
                                             calib)
                rcfg = fbr.ReconConfig(gamma=cfg.gamma, iters_per_block=cfg.iters,
                                       batch=cfg.batch, method=method,
                                       seed=derive_seed(seed, "recon"))
                qm, _ = fbr.reconstruct_model(fp_model, qm, calib, rcfg)
                wq_set = _sample_set(qm, cfg, sched,
                                     derive_seed(seed, "eval-sample"))
                tcfg = diffuse.SamplerConfig(steps=cfg.steps, eta=cfg.eta,
                                             seed=derive_seed(seed, "eval-traj"))
                _, curve = metrics.trajectory_mse(
                    fp_model, qm, sched, tcfg, batch=min(32, cfg.profile_batch),
                    shape=fp_set.shape[1:])
                key = f"{strat}+{method}"
                cells.setdefault(key, {"frechet": [], "mse_auc": []})
                cells[key]["frechet"].append(metrics.frechet_proxy(fp_set, wq_set))
                cells[key]["mse_auc"].append(metrics.curve_auc(curve))
    summary = {k: {"frechet_median": float(np.median(v["frechet"])),
                   "mse_auc_median": float(np.median(v["mse_auc"])),
                   "frechet": v["frechet"], "mse_auc": v["mse_auc"]}
               for k, v in cells.items()}
    best = min(summary, key=lambda k: summary[k]["frechet_median"])
    payload = {"config": asdict(cfg), "seeds": seeds, "cells": summary,
               "best_cell": best}
    jpath = _write_json(out / "ablation.json", payload)
    lines = ["# Ablation grid (median over seeds)", "",
             "| calibration | reconstruction | frechet | mse auc |",
             "|---|---|---|---|"]
    for k, v in sorted(summary.items()):
        s, m = k.split("+")
        lines.append(f"| {s} | {m} | {v['frechet_median']:.5g} "
                     f"| {v['mse_auc_median']:.5g} |")
    lines += ["", f"best cell: {best}", ""]
    (out / "ablation.md").write_text("\n".join(lines))
    return {"ablation": jpath, "markdown": str(out / "ablation.md")}


def cmd_report(cfg: RunConfig) -> dict:
    out = _outdir(cfg)
    gathered = {}
    for name in ("train_log", "diagnostics", "score_table", "recon_report",
                 "fidelity", "compression", "ablation"):
        p = out / f"{name}.json"
        if p.exists():
            gathered[name] = json.loads(p.read_text())
    if not gathered:
        raise CliError(f"no artifacts found under {out} "
                       f"(run the pipeline commands first)")
    jpath = _write_json(out / "report.json",
                        {"config": asdict(cfg), "artifacts": gathered})
    lines = ["# Run report", "", f"artifacts: {', '.join(sorted(gathered))}", ""]
    fid = gathered.get("fidelity")
    if fid:
        lines += ["## Fidelity",
                  f"- teacher-forced trajectory MSE (mean over steps): "
                  f"{fid['traj_mse_auc']:.6g}",
                  f"- Frechet proxy FP vs quantized: "
                  f"{fid['frechet_fp_vs_wq']['value']:.6g}", ""]
    comp = gathered.get("compression")
    if comp:
        lines += ["## Compression",
                  f"- Bops ratio: {comp['bops_ratio']:.3f}",
                  f"- size ratio: {comp['size_ratio']:.3f}", ""]
    (out / "report.md").write_text("\n".join(lines))
    return {"report": jpath, "markdown": str(out / "report.md")}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--arch", choices=["tiny_unet", "mlp_denoiser"])
    p.add_argument("--dataset", choices=["shapes8x8", "moons2d"])
    p.add_argument("--T", type=int, dest="T")
    p.add_argument("--steps", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--bits-w", type=int, dest="bits_w")
    p.add_argument("--bits-a", type=int, dest="bits_a")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--gamma", type=float)
    p.add_argument("--calib-size", type=int, dest="calib_size")
    p.add_argument("--strategy", choices=list(tdac.STRATEGIES))
    p.add_argument("--step-t", type=int, dest="step_t")
    p.add_argument("--recon", choices=list(fbr.METHODS))
    p.add_argument("--iters", type=int)
    p.add_argument("--train-iters", type=int, dest="train_iters")
    p.add_argument("--batch", type=int)
    p.add_argument("--profile-batch", type=int, dest="profile_batch")
    p.add_argument("--sample-batch", type=int, dest="sample_batch")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="edaq",
        description="post-training quantization pipeline for small diffusion models")
    sub = ap.add_subparsers(dest="command", required=True)

    for name, extra in [
        ("train", []),
        ("profile", ["--model"]),
        ("calibrate", ["--trajectory"]),
        ("quantize", ["--model", "--calibration"]),
        ("sample", ["--model"]),
        ("evaluate", ["--fp", "--quantized"]),
        ("ablate", ["--model", "--seeds"]),
        ("report", []),
    ]:
        p = sub.add_parser(name)
        _add_common(p)
        for flag in extra:
            if flag == "--seeds":
                p.add_argument("--seeds", default="0,1,2",
                               help="comma-separated seed list")
            else:
                p.add_argument(flag)
        if name == "quantize":
            p.add_argument("--iter-csv", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "train":
            result = cmd_train(cfg)
        elif args.command == "profile":
            result = cmd_profile(cfg, args.model or _default(cfg, "model_fp.edaq"))
        elif args.command == "calibrate":
            result = cmd_calibrate(cfg, args.trajectory
                                   or _default(cfg, "trajectory.edaq"))
        elif args.command == "quantize":
            result = cmd_quantize(cfg, args.model or _default(cfg, "model_fp.edaq"),
                                  args.calibration
                                  or _default(cfg, "calibration.edaq"),
                                  iter_csv=args.iter_csv)
        elif args.command == "sample":
            result = cmd_sample(cfg, args.model or _default(cfg, "model_wq.edaq"))
        elif args.command == "evaluate":
            result = cmd_evaluate(cfg, args.fp or _default(cfg, "model_fp.edaq"),
                                  args.quantized or _default(cfg, "model_wq.edaq"))
        elif args.command == "ablate":
            seeds = [int(s) for s in args.seeds.split(",") if s != ""]
            result = cmd_ablate(cfg, args.model or _default(cfg, "model_fp.edaq"),
                                seeds)
        else:
            result = cmd_report(cfg)
    except (CliError, OSError, tdac.TdacError, fbr.ReconError,
            quant.QuantError, diffuse.DiffusionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:                      # container/shape errors etc.
        from . import io
        if isinstance(e, io.ContainerError):
            print(f"error: {e}", file=sys.stderr)
            return 1
        raise
    for k, v in result.items():
        print(f"{k}: {v}")
    return 0


def _default(cfg: RunConfig, name: str):
    return str(Path(cfg.out) / name)


if __name__ == "__main__":
    raise SystemExit(main())
