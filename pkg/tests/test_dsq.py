import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from d2quant.dsq import (
    UpDownScaling,
    _s_step,
    apply_updown_scaling,
    dsq_quantize,
    fold_scale,
    mlp_forward,
    plain_objective,
    static_smooth_eta,
)
from d2quant.numerics import ShapeError
from d2quant.quant import QuantConfig, dequantize, quantize

seeds = st.integers(0, 2**32 - 1)


def toy_mlp(r, c=8, h=16):
    return ((r.standard_normal((h, c)) / np.sqrt(c)).astype(np.float32),
            (r.standard_normal((h, c)) / np.sqrt(c)).astype(np.float32),
            (r.standard_normal((c, h)) / np.sqrt(h)).astype(np.float32))


def assert_rel_close(a, b, rtol):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    assert np.abs(a - b).max() <= rtol * np.abs(b).max()


def test_updown_identity_and_uniform(rng):
    up, gate, down = toy_mlp(rng)
    u, d = apply_updown_scaling(up, gate, down, UpDownScaling(np.ones(16)))
    assert np.array_equal(u, up) and np.array_equal(d, down)
    u, d = apply_updown_scaling(up, gate, down, UpDownScaling(np.full(16, 2.0)))
    assert np.array_equal(u, 2 * up) and np.array_equal(d, down / 2)
    x = rng.standard_normal((5, 8)).astype(np.float32)
    assert_rel_close(mlp_forward(x, gate, u, d), mlp_forward(x, gate, up, down), 1e-5)


def test_updown_errors(rng):
    up, gate, down = toy_mlp(rng)
    with pytest.raises(ValueError):
        UpDownScaling(np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        UpDownScaling(np.array([1.0, np.inf]))
    with pytest.raises(ShapeError):
        apply_updown_scaling(up, gate, down, UpDownScaling(np.ones(3)))
    with pytest.raises(ShapeError):
        apply_updown_scaling(up, gate, down.T, UpDownScaling(np.ones(16)))


@given(seeds)
def test_updown_forward_invariance(seed):
    r = np.random.default_rng(seed)
    up, gate, down = toy_mlp(r)
    eta = UpDownScaling(np.exp2(r.uniform(-4, 4, 16)))
    u, d = apply_updown_scaling(up, gate, down, eta)
    x = r.standard_normal((6, 8)).astype(np.float32)
    assert_rel_close(mlp_forward(x, gate, u, d), mlp_forward(x, gate, up, down), 1e-5)


def test_static_smooth_examples(rng):
    flat = np.array([[1.0, -2.0], [-2.0, 1.0]], np.float32)
    assert np.array_equal(static_smooth_eta(flat).eta, [1.0, 1.0])
    two = np.array([[1.0, -3.0], [0.5, 0.0]], np.float32)
    np.testing.assert_array_equal(static_smooth_eta(two).eta, [0.5, 1.5])
    assert np.array_equal(static_smooth_eta(np.zeros((2, 3), np.float32)).eta, np.ones(3))
    w = rng.standard_normal((8, 12)).astype(np.float32)
    w[:, 3] = 0
    eta = static_smooth_eta(w)
    assert eta.eta[3] == 1.0
    colmax = np.abs(w / eta.eta).max(axis=0)
    nz = np.delete(colmax, 3)
    np.testing.assert_allclose(nz, nz[0], atol=1e-6)


def test_dsq_grid_aligned_is_exact():
    w = np.array([[0, 1, 2, 3], [3, 2, 1, 0]], np.float32)
    res = dsq_quantize(w, QuantConfig(2, 4), iters=15)
    assert np.array_equal(res.col_scale, np.ones(4))
    assert all(v == 0.0 for v in res.objective_trace)


def test_dsq_recovers_column_scale():
    w0 = np.array([[0, 1, 2, 3], [3, 0, 1, 2], [2, 3, 0, 1]], np.float32)
    col = np.array([2.0, 0.5, 1.0, 4.0], np.float32)
    w = w0 * col
    # Per-column scaling puts w off the per-row grid, so plain quantization is lossy.
    assert plain_objective(w, QuantConfig(2, 4)) > 0
    s = _s_step(w.astype(np.float64), w0.astype(np.float64), np.ones(4))
    np.testing.assert_allclose(s, col, rtol=1e-12)
    assert np.sum((w - w0 * s) ** 2) == 0.0


def test_dsq_s_step_matches_scalar_oracle(rng):
    w = rng.standard_normal((16, 8)).astype(np.float32)
    cfg = QuantConfig(2, 4)
    res = dsq_quantize(w, cfg, iters=15)
    assert res.objective < plain_objective(w, cfg)
    # the retained scale is the least-squares fit to the retained codes
    qt = dequantize(res.q_down).tolist()
    for j in range(8):
        assert res.col_scale[j] == pytest.approx(oracles.column_lstsq(w.tolist(), qt, j), abs=1e-6)


def test_s_step_oracle_direct(rng):
    w = rng.standard_normal((16, 8)).astype(np.float64)
    q = dequantize(quantize(w.astype(np.float32), QuantConfig(2, 4))).astype(np.float64)
    q[:, 5] = 0.0
    s = _s_step(w, q, np.full(8, 0.7))
    for j in range(8):
        assert s[j] == pytest.approx(oracles.column_lstsq(w.tolist(), q.tolist(), j), abs=1e-6)
    assert s[5] == 1.0


def test_dsq_zero_iterations_is_plain_rtn(rng):
    w = rng.standard_normal((8, 16)).astype(np.float32)
    cfg = QuantConfig(3, 8)
    res = dsq_quantize(w, cfg, iters=0)
    assert res.q_down.same_as(quantize(w, cfg))
    assert np.array_equal(res.col_scale, np.ones(16))
    assert res.objective_trace == [plain_objective(w, cfg)]
    with pytest.raises(ValueError):
        dsq_quantize(w, cfg, iters=-1)


@given(seeds, st.sampled_from([2, 3, 4]))
def test_dsq_monotone_steps_and_dominance(seed, bits):
    r = np.random.default_rng(seed)
    w = r.standard_normal((8, 16)).astype(np.float32) * r.uniform(0.5, 2, 16).astype(np.float32)
    cfg = QuantConfig(bits, 8)
    res = dsq_quantize(w, cfg, iters=15)
    for before, after in res.steps:
        assert after <= before + 1e-9
    assert res.objective <= plain_objective(w, cfg)
    assert res.objective_trace[-1] == min(res.objective_trace)
    assert all(np.isfinite(v) and v >= 0 for v in res.objective_trace)
    assert np.all(np.isfinite(res.col_scale)) and np.all(res.col_scale != 0)
    d = w.astype(np.float64) - res.reconstruct()
    assert np.sum(d * d) == pytest.approx(res.objective, rel=1e-5)


def test_fold_scale_examples(rng):
    w = rng.standard_normal((6, 8)).astype(np.float32)
    q = quantize(w, QuantConfig(4, 4))
    assert fold_scale(q, np.ones(6)).same_as(q)
    two = fold_scale(q, np.full(6, 2.0))
    assert np.array_equal(two.codes, q.codes) and np.array_equal(two.zero_points, q.zero_points)
    np.testing.assert_allclose(dequantize(two), 2 * dequantize(q), rtol=1e-6)
    with pytest.raises(ShapeError):
        fold_scale(q, np.ones(5))
    with pytest.raises(ValueError):
        fold_scale(q, np.array([1, 1, 0, 1, 1, 1.0]))


@given(seeds)
def test_fold_equivalence(seed):
    r = np.random.default_rng(seed)
    up, gate, down = toy_mlp(r, c=16, h=32)
    cfg = QuantConfig(2, 8)
    q_up, q_gate = quantize(up, cfg), quantize(gate, cfg)
    res = dsq_quantize(down, cfg, iters=5)
    x = r.standard_normal((7, 16)).astype(np.float32)
    explicit = mlp_forward(x, dequantize(q_gate), dequantize(q_up), dequantize(res.q_down), res.col_scale)
    folded = mlp_forward(x, dequantize(q_gate), dequantize(fold_scale(q_up, res.col_scale)),
                         dequantize(res.q_down))
    assert_rel_close(folded, explicit, 1e-5)
