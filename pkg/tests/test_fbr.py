"""Reconstruction semantics: target collection contracts, the gamma=0
reduction identity, loss decomposition, hardening soundness, prefix causality,
layer-wise reduction; run on the fast MLP and on single UNet blocks."""

import numpy as np
import pytest

from edaq import diffuse, fbr, net, quant, tdac
from edaq.fbr import (BlockLossRecord, ReconConfig, block_targets,
                      reconstruct_block, reconstruct_model, reconstruction_units)
from edaq.quant import attach_quantizers, quantize_array


@pytest.fixture(scope="module")
def mlp_setup():
    sched = diffuse.make_schedule(100)
    m = net.build_model("mlp_denoiser", seed=0)
    diffuse.train_denoiser(m, "moons2d", sched, iters=200, seed=1)
    traj = diffuse.run_trajectory(m, sched, diffuse.SamplerConfig(steps=20, seed=2),
                                  batch=64)
    _, calib = tdac.build_tdac(traj, None, 1.0, 96, seed=3)
    return m, calib


@pytest.fixture(scope="module")
def unet_setup():
    sched = diffuse.make_schedule(100)
    m = net.build_model("tiny_unet", seed=0)
    diffuse.train_denoiser(m, "shapes8x8", sched, iters=120, batch=16, seed=1)
    traj = diffuse.run_trajectory(m, sched, diffuse.SamplerConfig(steps=10, seed=2),
                                  batch=24)
    calib = tdac.baseline_calibration(traj, "equal_spaced", 48, seed=3)
    return m, calib


def fresh_qm(m, calib, bw=4, ba=8):
    return attach_quantizers(m, bw, ba, calib)


# ---------------------------------------------------------------------------
# target collection
# ---------------------------------------------------------------------------

def test_first_block_input_equals_raw_calibration(mlp_setup):
    """The first unit's quantized-prefix input is the raw model input to that
    layer; for the MLP that is concat(x, temb), whose x part is calib.x."""
    m, calib = mlp_setup
    qm = fresh_qm(m, calib)
    tg = block_targets(m, qm, calib, qm.base.blocks[0])
    np.testing.assert_array_equal(tg.x_in[:, :2], calib.x)


def test_passthrough_prefix_inputs_equal_fp_bit_exact(unet_setup):
    m, calib = unet_setup
    qm = fresh_qm(m, calib, bw=32, ba=32)
    blk = m.block("mid.res")
    tg = block_targets(m, qm, calib, blk)
    cap = net.Capture(blocks=True)
    from edaq.ndcore import no_grad
    outs = []
    with no_grad():
        for lo in range(0, len(calib.t), 64):
            c = net.Capture(blocks=True)
            m.forward(calib.x[lo:lo + 64], calib.t[lo:lo + 64], capture=c)
            outs.append(c.blocks["mid.res"][0].data)
    np.testing.assert_array_equal(tg.x_in, np.concatenate(outs))


def test_target_shapes_match_block_output(unet_setup):
    m, calib = unet_setup
    qm = fresh_qm(m, calib)
    blk = m.block("mid.attn")
    tg = block_targets(m, qm, calib, blk)
    assert tg.o_f.shape == (len(calib.t), 2 * m.config["base"], 4, 4)
    assert set(tg.front) == set(blk.spec().front_layers)
    for name, arr in tg.front.items():
        assert arr.shape[0] == len(calib.t)


def test_empty_calibration_rejected(mlp_setup):
    m, calib = mlp_setup
    qm = fresh_qm(m, calib)
    empty = tdac.CalibrationSet(x=calib.x[:0], t=calib.t[:0], provenance="x")
    with pytest.raises(fbr.ReconError):
        block_targets(m, qm, empty, qm.base.blocks[0])


# ---------------------------------------------------------------------------
# loss arithmetic
# ---------------------------------------------------------------------------

def test_eq9_arithmetic():
    """L = L_b + gamma * (L_m1 + L_m2): 0.5 + 0.5*(0.2+0.3) = 0.75."""
    lb, lm1, lm2, gamma = 0.5, 0.2, 0.3, 0.5
    assert lb + gamma * (lm1 + lm2) == pytest.approx(0.75)


def test_loss_decomposition_recomputed(unet_setup):
    """Reported total equals L_b + gamma*sum(L_mi) + reg at every iteration."""
    m, calib = unet_setup
    qm = fresh_qm(m, calib)
    blk = m.block("down.res0")
    tg = block_targets(m, qm, calib, blk)
    cfg = ReconConfig(gamma=0.7, iters_per_block=12, batch=8, seed=0)
    rec = reconstruct_block(qm, blk, tg, cfg)
    for i in range(rec.iters):
        lmi = sum(tr[i][1] for tr in rec.lmi_traces.values())
        want = rec.lb_trace[i] + 0.7 * lmi + rec.reg_trace[i]
        assert rec.total_trace[i] == pytest.approx(want, rel=1e-6)


def test_gamma0_decomposition_exact(mlp_setup):
    m, calib = mlp_setup
    qm = fresh_qm(m, calib)
    unit = qm.base.blocks[1]
    tg = block_targets(m, qm, calib, unit)
    cfg = ReconConfig(gamma=0.0, iters_per_block=8, batch=8, seed=0)
    rec = reconstruct_block(qm, unit, tg, cfg)
    for lb, rg, tot in zip(rec.lb_trace, rec.reg_trace, rec.total_trace):
        assert tot == pytest.approx(lb + rg, rel=1e-6)


# ---------------------------------------------------------------------------
# reduction identity (gamma=0 <=> block_wise), bit-identical
# ---------------------------------------------------------------------------

def run_mid_block(m, calib, method, gamma, iters=20, seed=7):
    qm = fresh_qm(m, calib)
    blk = m.block("mid.res")
    tg = block_targets(m, qm, calib, blk)
    cfg = ReconConfig(gamma=gamma, iters_per_block=iters, batch=8,
                      method=method, seed=seed)
    rec = reconstruct_block(qm, blk, tg, cfg)
    states = {n: (qm.wq[n].alpha.data.copy(), qm.aq[n].scale.data.copy())
              for n in [l.name for l in blk.layers()]}
    return rec, states


def test_reduction_identity_bit_exact(unet_setup):
    m, calib = unet_setup
    rec_a, st_a = run_mid_block(m, calib, "fbr", gamma=0.0)
    rec_b, st_b = run_mid_block(m, calib, "block_wise", gamma=1.0)
    assert rec_a.lb_trace == rec_b.lb_trace
    assert rec_a.total_trace == rec_b.total_trace
    assert rec_a.reg_trace == rec_b.reg_trace
    for n in st_a:
        np.testing.assert_array_equal(st_a[n][0], st_b[n][0])
        np.testing.assert_array_equal(st_a[n][1], st_b[n][1])


def test_gamma_positive_changes_optimization(unet_setup):
    m, calib = unet_setup
    rec_a, _ = run_mid_block(m, calib, "fbr", gamma=0.0)
    rec_c, _ = run_mid_block(m, calib, "fbr", gamma=1.0)
    assert rec_a.total_trace != rec_c.total_trace


# ---------------------------------------------------------------------------
# hardening and prefix causality
# ---------------------------------------------------------------------------

def test_hardening_soundness(mlp_setup):
    """After hardening, every dequantized weight sits on the quantizer grid:
    re-quantizing is a no-op."""
    m, calib = mlp_setup
    qm = fresh_qm(m, calib)
    cfg = ReconConfig(gamma=1.0, iters_per_block=15, batch=8, seed=0)
    reconstruct_model(m, qm, calib, cfg)
    for name in qm.layer_names():
        assert qm.w_mode[name] == quant.W_HARD
        wq = qm.wq[name]
        layer = qm.base.layer(name)
        deq = quantize_array(layer.weight.data, wq, "hard")
        np.testing.assert_array_equal(quantize_array(deq, wq, "nearest"), deq)


def test_prefix_causality(mlp_setup):
    """Reconstructing block k never mutates quantizers of blocks < k."""
    m, calib = mlp_setup
    qm = fresh_qm(m, calib)
    cfg = ReconConfig(gamma=1.0, iters_per_block=10, batch=8, seed=0)
    units = reconstruction_units(qm, "fbr")
    tg0 = block_targets(m, qm, calib, units[0])
    reconstruct_block(qm, units[0], tg0, cfg)
    frozen = {n: (qm.wq[n].alpha.data.copy(), qm.aq[n].scale.data.copy())
              for n in [l.name for l in units[0].layers()]}
    for unit in units[1:]:
        tg = block_targets(m, qm, calib, unit)
        reconstruct_block(qm, unit, tg, cfg)
    for n, (a, s) in frozen.items():
        np.testing.assert_array_equal(a, qm.wq[n].alpha.data)
        np.testing.assert_array_equal(s, qm.aq[n].scale.data)


def test_layer_wise_units_are_single_layers(mlp_setup):
    m, calib = mlp_setup
    qm = fresh_qm(m, calib)
    units = reconstruction_units(qm, "layer_wise")
    assert [u.name for u in units] == [l.name for l in m.conv_linear_layers()]
    for u in units:
        assert u.spec().front_layers == []


def test_reconstruct_model_record_count_and_improvement(mlp_setup):
    m, calib = mlp_setup
    qm = fresh_qm(m, calib)
    cfg = ReconConfig(gamma=1.0, iters_per_block=150, batch=16, seed=0)
    _, recs = reconstruct_model(m, qm, calib, cfg)
    assert len(recs) == len(m.blocks)
    for r in recs:
        assert r.lb_end < r.lb_start, f"{r.name}: {r.lb_start} -> {r.lb_end}"


def test_unknown_method_rejected(mlp_setup):
    m, calib = mlp_setup
    qm = fresh_qm(m, calib)
    with pytest.raises(fbr.ReconError):
        reconstruct_model(m, qm, calib, ReconConfig(method="sgd"))


def test_loss_report_shape(mlp_setup):
    m, calib = mlp_setup
    qm = fresh_qm(m, calib)
    cfg = ReconConfig(gamma=1.0, iters_per_block=5, batch=8, seed=0)
    _, recs = reconstruct_model(m, qm, calib, cfg)
    rep = fbr.loss_report(recs, cfg)
    assert len(rep["blocks"]) == len(recs)
    assert {"name", "lb_first", "lb_last", "lmi_sum_last"} <= set(rep["blocks"][0])