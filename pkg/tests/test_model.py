import json
import math
import os

import numpy as np
import pytest
from conftest import FIXTURES, SMALL

import oracles
from d2quant.model import (
    WEIGHT_SLOTS,
    ModelConfig,
    block_forward,
    init_random,
    model_forward,
    post_attn_norm,
    zero_model,
)
from d2quant.numerics import ShapeError
from d2quant.quant import identity_quantize

GOLDEN_TEXT = b"Quantization keeps the weights small; the bias keeps the mean honest."


def test_zero_block_is_passthrough(rng):
    m = zero_model(SMALL)
    x = rng.standard_normal((5, SMALL.d_model)).astype(np.float32)
    y, _ = block_forward(m.blocks[0], x, SMALL)
    assert np.array_equal(y, x)
    assert np.all(model_forward(m, [3]) == 0)


def test_tiny_block_matches_hand_evaluation():
    cfg = ModelConfig(n_layers=1, d_model=2, n_heads=1, d_ffn=2, max_seq=4)
    m = init_random(cfg, 3)
    blk = m.blocks[0]
    blk.pre_ln_gamma[:] = [1.5, 0.5]
    blk.post_attn_ln_gamma[:] = [0.75, 1.25]
    blk.post_attn_ln_bias[:] = [0.1, -0.2]
    x = np.array([[0.3, -1.2]], np.float32)
    xs = [float(v) for v in x[0]]
    W = {k: getattr(blk, k).astype(np.float64).tolist() for k in WEIGHT_SLOTS}

    def lin(v, w):
        return [sum(v[k] * w[i][k] for k in range(len(v))) for i in range(len(w))]

    a = oracles.rmsnorm_row(xs, [1.5, 0.5], [0.0, 0.0], cfg.norm_eps)
    # a single token attends only to itself, and rotation at position 0 is the identity
    attn = lin(lin(a, W["w_v"]), W["w_o"])
    h = [xs[i] + attn[i] for i in range(2)]
    b = oracles.rmsnorm_row(h, [0.75, 1.25], [0.1, -0.2], cfg.norm_eps)
    g, u = lin(b, W["w_gate"]), lin(b, W["w_up"])
    hid = [oracles.silu(g[i]) * u[i] for i in range(2)]
    mo = lin(hid, W["w_down"])
    expected = [h[i] + mo[i] for i in range(2)]
    y, cap = block_forward(blk, x, cfg, capture=("post_attn_ln", "h"))
    np.testing.assert_allclose(y[0], expected, rtol=1e-5)
    np.testing.assert_allclose(cap["post_attn_ln"][0], b, rtol=1e-5)
    np.testing.assert_allclose(cap["h"][0], h, rtol=1e-5)


def test_identity_quantized_slots_match(small_model):
    toks = np.arange(20) * 7 % 256
    ref = model_forward(small_model, toks)
    q = small_model.copy()
    for blk in q.blocks:
        for name in WEIGHT_SLOTS:
            setattr(blk, name, identity_quantize(getattr(blk, name)))
    assert model_forward(q, toks).tobytes() == ref.tobytes()


def test_deterministic_and_seeded():
    a, b, c = init_random(SMALL, 1), init_random(SMALL, 1), init_random(SMALL, 2)
    assert a.blocks[0].w_q.tobytes() == b.blocks[0].w_q.tobytes()
    assert not np.array_equal(a.blocks[0].w_q, c.blocks[0].w_q)
    toks = [1, 2, 3, 4]
    assert model_forward(a, toks).tobytes() == model_forward(b, toks).tobytes()


def test_init_variance():
    cfg = ModelConfig(n_layers=1, d_model=64, n_heads=4, d_ffn=64)
    m = init_random(cfg, 0)
    for name in WEIGHT_SLOTS:
        w = getattr(m.blocks[0], name)
        assert abs(w.var() * 64 - 1) < 0.2, name
    assert np.all(m.blocks[0].post_attn_ln_bias == 0)


def test_causality(small_model, rng):
    toks = rng.integers(0, 256, 16)
    ref = model_forward(small_model, toks)
    changed = toks.copy()
    changed[9:] = rng.integers(0, 256, 7)
    out = model_forward(small_model, changed)
    assert np.array_equal(out[:9], ref[:9])
    assert not np.array_equal(out[9:], ref[9:])


def test_bias_shifts_post_attention_norm_exactly(small_model, rng):
    blk = small_model.blocks[0]
    h = rng.standard_normal((4, SMALL.d_model)).astype(np.float32)
    base = post_attn_norm(blk, h, SMALL)
    b = np.float32(0.25) * np.ones(SMALL.d_model, np.float32)
    blk.post_attn_ln_bias = b
    np.testing.assert_allclose(post_attn_norm(blk, h, SMALL) - base, np.tile(b, (4, 1)), atol=1e-6)


def test_input_validation(small_model):
    with pytest.raises(ValueError):
        model_forward(small_model, [0, 256])
    with pytest.raises(ValueError):
        model_forward(small_model, [-1])
    with pytest.raises(ShapeError):
        model_forward(small_model, np.zeros(SMALL.max_seq + 1, int))
    with pytest.raises(ShapeError):
        block_forward(small_model.blocks[0], np.zeros((3, 5), np.float32), SMALL)
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)


def test_rope_toggle_changes_output():
    cfg = ModelConfig(n_layers=1, d_model=16, n_heads=2, d_ffn=32, max_seq=8)
    a = init_random(cfg, 0)
    b = init_random(ModelConfig(n_layers=1, d_model=16, n_heads=2, d_ffn=32, max_seq=8, rope=False), 0)
    toks = [5, 6, 7, 8]
    # position 0 is unrotated, later positions differ
    la, lb = model_forward(a, toks), model_forward(b, toks)
    np.testing.assert_array_equal(la[0], lb[0])
    assert not np.allclose(la[1:], lb[1:])


def test_golden_logits():
    golden = np.load(os.path.join(FIXTURES, "golden_logits.npy"))
    m = init_random(SMALL, 2024)
    out = model_forward(m, np.frombuffer(GOLDEN_TEXT[:SMALL.max_seq], np.uint8))
    np.testing.assert_allclose(out, golden, rtol=1e-5, atol=1e-6)


def test_golden_perplexity(fixture_text):
    from d2quant.evaluate import perplexity

    with open(os.path.join(FIXTURES, "golden_eval.json")) as fh:
        golden = json.load(fh)
    m = init_random(SMALL, 2024)
    res = perplexity(m, np.frombuffer(fixture_text, np.uint8))
    assert res.perplexity == pytest.approx(golden["perplexity"], rel=1e-5)
    assert res.token_count == golden["token_count"]
    assert res.perplexity == pytest.approx(math.exp(res.mean_nll), rel=1e-9)
