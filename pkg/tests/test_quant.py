"""Quantizer semantics against independent oracles, range-init grid search,
straight-through gradients vs finite differences, fuzzing of the round-trip/
idempotence/monotonicity/clipping properties, attach/restore round trips."""

import numpy as np
import pytest

from edaq import diffuse, net, quant
from edaq.ndcore import Tensor, backward
from edaq.quant import (QuantError, QuantizerState, attach_quantizers, fq_act,
                        fq_weight_soft, init_range, quantize_array,
                        round_half_away)


def make_act_q(s, z, bits):
    q = QuantizerState(bits, "act_per_tensor")
    q.scale = Tensor(np.array([s], dtype=np.float32))
    q.zero_point = np.array([z], dtype=np.float32)
    q.degenerate = np.array([False])
    q.chosen_k = np.array([100])
    q.initialized = True
    return q


def oracle_nearest(x, s, z, bits):
    """Independent scalar oracle: nearest grid value with half-away ties."""
    qmax = (1 << bits) - 1
    grid = np.array([(qq - z) * s for qq in range(qmax + 1)])
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    flat = np.asarray(x, dtype=np.float64).ravel()
    res = []
    for v in flat:
        d = np.abs(grid - v)
        best = np.min(d)
        cand = grid[d <= best + 1e-12]
        pick = cand[np.argmax(np.abs(cand))]  # ties away from zero
        res.append(pick)
    return np.array(res).reshape(np.shape(x))


# ---------------------------------------------------------------------------
# fake_quant scalar examples
# ---------------------------------------------------------------------------

def test_on_grid_value_is_fixed():
    q = make_act_q(1.0, 0.0, 8)
    x = np.array([5.0], dtype=np.float32)
    np.testing.assert_array_equal(quantize_array(x, q), x)


def test_minmax_example_b4():
    """x=[-1,0,2] at b=4 min-max init: s=0.2, z=5; endpoints and zero exact."""
    q = QuantizerState(4, "act_per_tensor")
    init_range(np.array([-1.0, 0.0, 2.0], dtype=np.float32), q)
    assert q.scale.data[0] == pytest.approx(0.2, abs=1e-7)
    assert q.zero_point[0] == 5
    out = quantize_array(np.array([-1.0, 0.0, 2.0], dtype=np.float32), q)
    np.testing.assert_allclose(out, [-1.0, 0.0, 2.0], atol=1e-6)


def test_clipping_above_range():
    q = make_act_q(0.2, 5.0, 4)
    out = quantize_array(np.array([100.0], dtype=np.float32), q)
    assert out[0] == pytest.approx((15 - 5) * 0.2, abs=1e-6)


def test_matches_grid_oracle_randomized():
    rng = np.random.default_rng(0)
    for bits in (2, 4, 8):
        s = float(rng.uniform(0.05, 0.5))
        z = float(rng.integers(0, (1 << bits)))
        q = make_act_q(s, z, bits)
        x = rng.uniform(-(z + 2) * s, ((1 << bits) + 2) * s, size=257).astype(np.float32)
        got = quantize_array(x, q)
        want = oracle_nearest(x, s, z, bits)
        np.testing.assert_allclose(got, want, atol=1e-5)


def test_round_half_away_tie_rule():
    np.testing.assert_array_equal(
        round_half_away(np.array([0.5, 1.5, -0.5, -1.5, 2.4, -2.4])),
        [1.0, 2.0, -1.0, -2.0, 2.0, -2.0])


def test_uninitialized_quantizer_is_error():
    q = QuantizerState(8, "act_per_tensor")
    with pytest.raises(QuantError):
        quantize_array(np.zeros(3, dtype=np.float32), q)


# ---------------------------------------------------------------------------
# init_range grid search
# ---------------------------------------------------------------------------

def test_uniform_data_chooses_full_range():
    rng = np.random.default_rng(1)
    q = QuantizerState(8, "act_per_tensor")
    init_range(rng.uniform(-1, 1, size=4096).astype(np.float32), q)
    assert q.chosen_k[0] == 100


def test_outlier_shrinks_range():
    rng = np.random.default_rng(2)
    x = rng.normal(size=4096).astype(np.float32)
    x[0] = 40.0                      # one extreme outlier
    q = QuantizerState(4, "act_per_tensor")
    init_range(x, q)
    assert q.chosen_k[0] < 100


def test_constant_input_degenerate_passthrough():
    q = QuantizerState(8, "act_per_tensor")
    x = np.full(64, 0.7, dtype=np.float32)
    init_range(x, q)
    assert bool(q.degenerate[0])
    assert q.scale.data[0] == 1.0 and q.zero_point[0] == 0.0
    np.testing.assert_array_equal(quantize_array(x, q), x)


def test_per_channel_independence():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(4, 9)).astype(np.float32)
    q1 = QuantizerState(4, "weight_per_channel")
    init_range(w, q1)
    w2 = w.copy()
    w2[2] *= 7.0                     # perturb one channel only
    q2 = QuantizerState(4, "weight_per_channel")
    init_range(w2, q2)
    for c in (0, 1, 3):
        assert q1.scale.data[c] == q2.scale.data[c]
        assert q1.zero_point[c] == q2.zero_point[c]
    assert q1.scale.data[2] != q2.scale.data[2]


def test_empty_samples_rejected():
    with pytest.raises(QuantError):
        init_range(np.zeros((0,)), QuantizerState(8, "act_per_tensor"))


# ---------------------------------------------------------------------------
# STE / LSQ gradients
# ---------------------------------------------------------------------------

def _sum(t):
    from edaq.ndcore import sum as nd_sum
    return nd_sum(t)


def test_ste_passthrough_gradient_in_range():
    # z=8, b=4, s=0.1 -> representable x in [-0.8, 0.7]; 0.9 clips above
    q = make_act_q(0.1, 8.0, 4)
    x = Tensor(np.array([0.23, -0.31, 0.9], dtype=np.float32), requires_grad=True)
    y = fq_act(x, q)
    backward(_sum(y))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 0.0])


def test_scale_gradient_clipped_branches_match_finite_differences():
    """On the clipped branches the dequantized value is (qmax-z)*s or -z*s
    exactly, so central differences at a fixed integer branch must match."""
    bits, z, s0 = 4, 5.0, 0.1
    for x_val, expect in [(3.0, 15 - 5.0), (-0.72, -5.0)]:
        q = make_act_q(s0, z, bits)
        q.scale.requires_grad = True
        x = Tensor(np.array([x_val], dtype=np.float32))
        y = fq_act(x, q)
        q.scale.zero_grad()
        backward(_sum(y))
        analytic = float(q.scale.grad[0])
        h = 1e-4
        vals = []
        for d in (h, -h):
            qd = make_act_q(s0 + d, z, bits)
            vals.append(float(quantize_array(
                np.array([x_val], dtype=np.float64), qd)[0]))
        fd = (vals[0] - vals[1]) / (2 * h)
        assert analytic == pytest.approx(expect, abs=1e-6)
        assert analytic == pytest.approx(fd, rel=1e-3, abs=1e-4)


def test_scale_gradient_in_range_is_lsq_form():
    # inside the range the STE/LSQ derivative is round(u) - u
    q = make_act_q(0.1, 5.0, 4)
    q.scale.requires_grad = True
    x = Tensor(np.array([0.23], dtype=np.float32))
    backward(_sum(fq_act(x, q)))
    u = 0.23 / 0.1
    assert float(q.scale.grad[0]) == pytest.approx(round(u) - u, abs=1e-4)


def test_rounding_gradients_flow_only_into_alpha():
    rng = np.random.default_rng(4)
    w = Tensor(rng.normal(size=(3, 5)).astype(np.float32), requires_grad=True)
    q = QuantizerState(4, "weight_per_channel")
    init_range(w.data, q)
    quant.init_rounding(q, w.data)
    q.alpha.requires_grad = True
    y = fq_weight_soft(w, q)
    backward(_sum(y))
    assert w.grad is None
    assert q.alpha.grad is not None and np.any(q.alpha.grad != 0)


def test_alpha_gradient_matches_finite_difference():
    rng = np.random.default_rng(5)
    w = Tensor(rng.normal(size=(2, 4)).astype(np.float32))
    q = QuantizerState(4, "weight_per_channel")
    init_range(w.data, q)
    quant.init_rounding(q, w.data)
    q.alpha.requires_grad = True
    q.alpha.zero_grad()
    backward(_sum(fq_weight_soft(w, q)))
    analytic = q.alpha.grad.copy()
    h = 1e-4
    for idx in [(0, 0), (1, 2), (0, 3)]:
        orig = q.alpha.data[idx]
        q.alpha.data[idx] = orig + h
        hi = quantize_array(w.data.astype(np.float64), q, "soft").sum()
        q.alpha.data[idx] = orig - h
        lo = quantize_array(w.data.astype(np.float64), q, "soft").sum()
        q.alpha.data[idx] = orig
        assert analytic[idx] == pytest.approx((hi - lo) / (2 * h), rel=1e-3, abs=1e-5)


def test_rect_sigmoid_asymptotes():
    a = Tensor(np.array([-50.0, 0.0, 50.0], dtype=np.float32))
    h = quant.rect_sigmoid(a).data
    assert h[0] == 0.0 and h[2] == 1.0 and abs(h[1] - 0.5) < 1e-6


def test_warm_start_soft_reproduces_weight_and_hard_is_nearest():
    rng = np.random.default_rng(6)
    w = rng.normal(size=(4, 16)).astype(np.float32)
    q = QuantizerState(4, "weight_per_channel")
    init_range(w, q)
    quant.init_rounding(q, w)
    # inside the clipping range the soft-quantized weight equals w
    s = q.scale.data[:, None].astype(np.float64)
    z = q.zero_point[:, None].astype(np.float64)
    u = w / s
    v = np.floor(u) + (u - np.floor(u)) + z
    in_range = (v >= 0) & (v <= q.qmax)
    assert in_range.any()
    soft = quantize_array(w, q, "soft")
    np.testing.assert_allclose(soft[in_range], w[in_range], atol=2e-5)
    # hardening the warm start is exactly nearest rounding
    hard = quantize_array(w, q, "hard")
    nearest = quantize_array(w, q, "nearest")
    np.testing.assert_allclose(hard, nearest, atol=1e-7)


# ---------------------------------------------------------------------------
# property fuzz (round-trip bound, idempotence, monotonicity, clipping)
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("bits", [2, 4, 8])
def test_fuzz_quantizer_properties(bits):
    rng = np.random.default_rng(100 + bits)
    n = 100_000
    s = float(rng.uniform(0.01, 0.7))
    z = float(rng.integers(0, (1 << bits)))
    q = make_act_q(s, z, bits)
    qmax = (1 << bits) - 1
    x = np.concatenate([
        rng.uniform((-z - 3) * s, (qmax - z + 3) * s, size=n // 2),
        rng.normal(scale=(qmax + 1) * s / 4, size=n - n // 2),
    ]).astype(np.float32)
    y = quantize_array(x, q)

    # clipping: quantized integers always within [0, 2^b - 1]
    ints = round_half_away(y / s) + z
    assert ints.min() >= -0.001 and ints.max() <= qmax + 0.001

    # round-trip bound inside the clipping range
    lo, hi = (0 - z) * s, (qmax - z) * s
    mask = (x >= lo) & (x <= hi)
    assert np.all(np.abs(y[mask] - x[mask]) <= s / 2 + 1e-6)

    # idempotence, bit-exact
    np.testing.assert_array_equal(quantize_array(y, q), y)

    # monotonicity
    order = np.argsort(x, kind="mergesort")
    assert np.all(np.diff(y[order]) >= 0)


# ---------------------------------------------------------------------------
# attach / serialize
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def mlp_setup():
    sched = diffuse.make_schedule(100)
    m = net.build_model("mlp_denoiser", seed=0)
    diffuse.train_denoiser(m, "moons2d", sched, iters=150, seed=1)
    traj = diffuse.run_trajectory(m, sched, diffuse.SamplerConfig(steps=20, seed=2),
                                  batch=32)
    from edaq.tdac import baseline_calibration
    calib = baseline_calibration(traj, "equal_spaced", 64, seed=3)
    return m, sched, calib


def test_attach_covers_every_layer(mlp_setup):
    m, _, calib = mlp_setup
    qm = attach_quantizers(m, 8, 8, calib)
    names = {l.name for l in m.conv_linear_layers()}
    assert set(qm.wq) == names and set(qm.aq) == names
    for n in names:
        assert qm.wq[n].initialized and qm.aq[n].initialized


def test_attach_passthrough_is_bit_exact(mlp_setup):
    m, _, calib = mlp_setup
    qm = attach_quantizers(m, 32, 32, calib)
    x = calib.x[:8]
    t = calib.t[:8]
    np.testing.assert_array_equal(m.forward(x, t).data, qm.forward(x, t).data)


def test_attach_w8a8_small_but_nonzero_error(mlp_setup):
    m, _, calib = mlp_setup
    qm = attach_quantizers(m, 8, 8, calib)
    x, t = calib.x[:16], calib.t[:16]
    err = float(((m.forward(x, t).data - qm.forward(x, t).data) ** 2).mean())
    assert 0 < err < 1.0


def test_quantized_checkpoint_roundtrip(tmp_path, mlp_setup):
    m, _, calib = mlp_setup
    qm = attach_quantizers(m, 4, 8, calib)
    p = tmp_path / "wq.edaq"
    net.save_checkpoint(m, p, extra_tensors=qm.state_tensors(),
                        extra_meta=qm.state_meta())
    m2, extra, meta = net.load_checkpoint(p)
    qm2 = quant.restore_quantized(m2, extra, meta)
    x, t = calib.x[:8], calib.t[:8]
    np.testing.assert_array_equal(qm.forward(x, t).data, qm2.forward(x, t).data)
    for n in qm.layer_names():
        np.testing.assert_array_equal(qm.wq[n].scale.data, qm2.wq[n].scale.data)
        np.testing.assert_array_equal(qm.wq[n].alpha.data, qm2.wq[n].alpha.data)
        np.testing.assert_array_equal(qm.aq[n].scale.data, qm2.aq[n].scale.data)


def test_attach_empty_calibration_rejected(mlp_setup):
    m, _, calib = mlp_setup
    from edaq.tdac import CalibrationSet
    empty = CalibrationSet(x=np.zeros((0, 2), dtype=np.float32),
                           t=np.zeros(0, dtype=np.int64), provenance="x")
    with pytest.raises(QuantError):
        attach_quantizers(m, 8, 8, empty)
