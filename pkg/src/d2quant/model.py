"""A small decoder-only transformer over bytes, used as the quantization target.

Pre-norm blocks with causal multi-head attention (optional rotary encoding) and
a SiLU-gated MLP; both normalizations are RMSNorm. The post-attention norm has
an extra additive bias slot that starts at zero.

Every weight slot holds either a float32 matrix or a quantized tensor, which is
dequantized on the fly.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, fields
from typing import Iterable, Union

import numpy as np

from .numerics import ShapeError, linear, rmsnorm, silu, softmax_rows
from .quant import IdentityQuantized, QuantizedTensor, effective

VOCAB = 256
ATTN_SLOTS = ("w_q", "w_k", "w_v", "w_o")
MLP_SLOTS = ("w_up", "w_gate", "w_down")
WEIGHT_SLOTS = ATTN_SLOTS + MLP_SLOTS

Slot = Union[np.ndarray, QuantizedTensor, IdentityQuantized]


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    vocab: int = VOCAB
    max_seq: int = 128
    rope: bool = True
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ffn", "vocab", "max_seq"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("n_heads must divide d_model")
        if self.rope and self.head_dim % 2:
            raise ValueError("rotary encoding needs an even head dimension")
        if self.norm_eps <= 0:
            raise ValueError("norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class BlockWeights:
    w_q: Slot
    w_k: Slot
    w_v: Slot
    w_o: Slot
    w_up: Slot
    w_gate: Slot
    w_down: Slot
    pre_ln_gamma: np.ndarray
    post_attn_ln_gamma: np.ndarray
    post_attn_ln_bias: np.ndarray
    # Explicit down-projection column scale, only set on the unfolded debug path.
    col_scale: np.ndarray | None = None

    def slots(self) -> dict[str, Slot]:
        return {name: getattr(self, name) for name in WEIGHT_SLOTS}


@dataclass
class ModelBundle:
    config: ModelConfig
    embedding: np.ndarray
    blocks: list[BlockWeights]
    final_norm_gamma: np.ndarray
    head: np.ndarray

    def __post_init__(self):
        if len(self.blocks) != self.config.n_layers:
            raise ShapeError(f"{len(self.blocks)} blocks for n_layers={self.config.n_layers}")

    def copy(self) -> "ModelBundle":
        return copy.deepcopy(self)


def init_random(cfg: ModelConfig, seed: int) -> ModelBundle:
    """Gaussian weights with variance ``1 / fan_in``; norm gains one, DAC biases zero."""
    rng = np.random.default_rng(seed)

    def w(rows: int, cols: int) -> np.ndarray:
        return (rng.standard_normal((rows, cols)) / np.sqrt(cols)).astype(np.float32)

    d, f = cfg.d_model, cfg.d_ffn
    embedding = w(cfg.vocab, d)
    blocks = []
    for _ in range(cfg.n_layers):
        blocks.append(BlockWeights(
            w_q=w(d, d), w_k=w(d, d), w_v=w(d, d), w_o=w(d, d),
            w_up=w(f, d), w_gate=w(f, d), w_down=w(d, f),
            pre_ln_gamma=np.ones(d, np.float32),
            post_attn_ln_gamma=np.ones(d, np.float32),
            post_attn_ln_bias=np.zeros(d, np.float32),
        ))
    head = w(cfg.vocab, d)
    return ModelBundle(cfg, embedding, blocks, np.ones(d, np.float32), head)


def _rope_tables(length: int, head_dim: int, base: float):
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.arange(length, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def _apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: [heads, L, head_dim] float64, rotate-half convention
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def attention(block: BlockWeights, a: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Causal multi-head self-attention on normalized input ``a`` [L, d_model]."""
    length = a.shape[0]
    nh, dh = cfg.n_heads, cfg.head_dim

    def heads(t: np.ndarray) -> np.ndarray:
        return t.astype(np.float64).reshape(length, nh, dh).transpose(1, 0, 2)

    q = heads(linear(a, effective(block.w_q)))
    k = heads(linear(a, effective(block.w_k)))
    v = heads(linear(a, effective(block.w_v)))
    if cfg.rope:
        cos, sin = _rope_tables(length, dh, cfg.rope_base)
        q, k = _apply_rope(q, cos, sin), _apply_rope(k, cos, sin)
    scores = np.matmul(q, k.transpose(0, 2, 1)) / np.sqrt(dh)
    mask = np.triu(np.ones((length, length), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    probs = softmax_rows(scores).astype(np.float64)
    ctx = np.matmul(probs, v).transpose(1, 0, 2).reshape(length, cfg.d_model)
    return linear(ctx.astype(np.float32), effective(block.w_o))


def mlp(block: BlockWeights, a: np.ndarray) -> np.ndarray:
    h = silu(linear(a, effective(block.w_gate))) * linear(a, effective(block.w_up))
    if block.col_scale is not None:
        h = (h.astype(np.float64) * block.col_scale).astype(np.float32)
    return linear(h, effective(block.w_down))


def attn_residual(block: BlockWeights, x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """``x + Attn(PreLN(x))``, the stream the post-attention norm reads."""
    a = rmsnorm(x, block.pre_ln_gamma, None, cfg.norm_eps)
    return (x + attention(block, a, cfg)).astype(np.float32)


def post_attn_norm(block: BlockWeights, h: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    return rmsnorm(h, block.post_attn_ln_gamma, block.post_attn_ln_bias, cfg.norm_eps)


def block_forward(block: BlockWeights, x: np.ndarray, cfg: ModelConfig,
                  capture: Iterable[str] = ()) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """One pre-norm block. ``capture`` may name ``pre_ln``, ``h`` and ``post_attn_ln``."""
    if x.ndim != 2 or x.shape[1] != cfg.d_model:
        raise ShapeError(f"block input must be [L, {cfg.d_model}], got {x.shape}")
    if x.shape[0] > cfg.max_seq:
        raise ShapeError(f"sequence length {x.shape[0]} exceeds max_seq {cfg.max_seq}")
    capture = set(capture)
    out: dict[str, np.ndarray] = {}
    if "pre_ln" in capture:
        out["pre_ln"] = rmsnorm(x, block.pre_ln_gamma, None, cfg.norm_eps)
    h = attn_residual(block, x, cfg)
    a = post_attn_norm(block, h, cfg)
    if "h" in capture:
        out["h"] = h
    if "post_attn_ln" in capture:
        out["post_attn_ln"] = a
    y = (h + mlp(block, a)).astype(np.float32)
    return y, out


def check_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    ids = np.asarray(tokens)
    if ids.ndim != 1 or ids.shape[0] == 0:
        raise ShapeError("tokens must be a non-empty 1-D sequence")
    if not np.issubdtype(ids.dtype, np.integer) or ids.min() < 0 or ids.max() >= cfg.vocab:
        raise ValueError(f"token ids must be integers in [0, {cfg.vocab})")
    if ids.shape[0] > cfg.max_seq:
        raise ShapeError(f"sequence length {ids.shape[0]} exceeds max_seq {cfg.max_seq}")
    return ids.astype(np.int64)


def embed(m: ModelBundle, tokens) -> np.ndarray:
    ids = check_tokens(tokens, m.config)
    return m.embedding[ids].copy()


def final_logits(m: ModelBundle, x: np.ndarray) -> np.ndarray:
    return linear(rmsnorm(x, m.final_norm_gamma, None, m.config.norm_eps), m.head)


def model_forward(m: ModelBundle, tokens) -> np.ndarray:
    """Logits ``[L, vocab]`` for one token sequence."""
    x = embed(m, tokens)
    for block in m.blocks:
        x, _ = block_forward(block, x, m.config)
    return final_logits(m, x)


def fold_explicit_scales(m: ModelBundle) -> ModelBundle:
    """Move every explicit ``col_scale`` into the quantized up-projection scales."""
    from .dsq import fold_scale

    out = m.copy()
    for block in out.blocks:
        if block.col_scale is None:
            continue
        if not isinstance(block.w_up, QuantizedTensor):
            raise TypeError("folding requires a quantized up-projection")
        block.w_up = fold_scale(block.w_up, block.col_scale)
        block.col_scale = None
    return out


def zero_model(cfg: ModelConfig) -> ModelBundle:
    """All weights zero: every block is a residual passthrough and logits are zero."""
    m = init_random(cfg, 0)
    m.embedding[:] = 0
    m.head[:] = 0
    for block in m.blocks:
        for name in WEIGHT_SLOTS:
            getattr(block, name)[:] = 0
    return m


def final_features(m: ModelBundle, tokens) -> np.ndarray:
    """Final-norm hidden states ``[L, d_model]`` that the output head reads."""
    x = embed(m, tokens)
    for block in m.blocks:
        x, _ = block_forward(block, x, m.config)
    return rmsnorm(x, m.final_norm_gamma, None, m.config.norm_eps)


def fit_head(m: ModelBundle, sequences, l2: float = 1e-4, max_iter: int = 100) -> float:
    """Fit the output head by L2-regularised softmax regression on next-byte targets.

    Only the head changes; the rest of the network keeps its weights. The
    problem is convex, so the fit is a deterministic function of its inputs.
    Returns the final mean training loss (nats).
    """
    from scipy.optimize import minimize

    feats, targets = [], []
    for seq in sequences:
        ids = check_tokens(seq, m.config)
        feats.append(final_features(m, ids)[:-1])
        targets.append(ids[1:])
    x = np.concatenate(feats).astype(np.float64)
    t = np.concatenate(targets)
    n, d = x.shape
    v = m.config.vocab
    rows = np.arange(n)

    def loss_and_grad(flat):
        w = flat.reshape(v, d)
        z = x @ w.T
        z -= z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        p = np.exp(z - lse[:, None])
        loss = float((lse - z[rows, t]).mean() + l2 * flat @ flat)
        p[rows, t] -= 1.0
        grad = (p.T @ x) / n + 2.0 * l2 * w
        return loss, grad.ravel()

    res = minimize(loss_and_grad, m.head.astype(np.float64).ravel(), jac=True,
                   method="L-BFGS-B", options={"maxiter": max_iter})
    m.head = res.x.reshape(v, d).astype(np.float32)
    return float(res.fun)


def toy_model(seed: int, text: bytes, cfg: ModelConfig | None = None,
              n_fit: int = 64, max_iter: int = 100) -> ModelBundle:
    """Random body plus a head fitted on the first ``n_fit`` windows of ``text``."""
    cfg = cfg or ModelConfig()
    m = init_random(cfg, seed)
    ids = np.frombuffer(text, dtype=np.uint8).astype(np.int64)
    L = cfg.max_seq
    seqs = [ids[i * L:(i + 1) * L] for i in range(min(n_fit, len(ids) // L))]
    if not seqs:
        raise ValueError("text shorter than one window")
    fit_head(m, seqs, max_iter=max_iter)
    return m
