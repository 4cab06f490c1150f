"""Perplexity and weight-reconstruction metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import WEIGHT_SLOTS, ModelBundle, model_forward
from .parallel import map_ordered
from .quant import effective


@dataclass
class EvalResult:
    perplexity: float
    mean_nll: float
    token_count: int
    reconstruction: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "perplexity": self.perplexity,
            "mean_nll": self.mean_nll,
            "token_count": self.token_count,
            "reconstruction": self.reconstruction,
        }


def windows(ids: np.ndarray, seq_len: int) -> list[np.ndarray]:
    """Non-overlapping windows; a tail shorter than two tokens is dropped."""
    if seq_len < 2:
        raise ValueError("seq_len must be at least 2")
    out = [ids[i:i + seq_len] for i in range(0, len(ids), seq_len)]
    return [w for w in out if len(w) >= 2]


def _window_nll(m: ModelBundle, w: np.ndarray) -> tuple[float, int]:
    logits = model_forward(m, w).astype(np.float64)[:-1]
    targets = w[1:]
    mx = logits.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(logits - mx).sum(axis=1))
    nll = lse - logits[np.arange(len(targets)), targets]
    return float(nll.sum()), len(targets)


def perplexity(m: ModelBundle, ids, seq_len: int | None = None) -> EvalResult:
    """Next-byte cross-entropy (nats) over non-overlapping windows."""
    ids = np.asarray(ids, dtype=np.int64)
    seq_len = seq_len or m.config.max_seq
    ws = windows(ids, seq_len)
    if not ws:
        raise ValueError("text too short to evaluate")
    parts = map_ordered(lambda w: _window_nll(m, w), ws)
    # summed in window order so the result does not depend on the thread count
    total = 0.0
    count = 0
    for s, n in parts:
        total += s
        count += n
    mean = total / count
    return EvalResult(perplexity=math.exp(mean), mean_nll=mean, token_count=count)


def tensor_errors(ref: np.ndarray, approx: np.ndarray) -> dict[str, float]:
    r = ref.astype(np.float64)
    d = r - approx.astype(np.float64)
    norm = float(np.sqrt(np.sum(r * r)))
    return {
        "frobenius_rel_err": float(np.sqrt(np.sum(d * d))) / norm if norm > 0 else 0.0,
        "max_abs_err": float(np.abs(d).max()),
    }


def reconstruction_table(reference: ModelBundle, m: ModelBundle) -> dict[str, dict[str, float]]:
    """Per-slot errors of ``m``'s effective weights against ``reference``.

    Down/up projections of a folded dual-scale block are compared as stored,
    so the column scale shows up as up-projection error.
    """
    table = {}
    for i, (rb, mb) in enumerate(zip(reference.blocks, m.blocks)):
        for name in WEIGHT_SLOTS:
            table[f"blocks.{i}.{name}"] = tensor_errors(effective(rb.slots()[name]),
                                                        effective(mb.slots()[name]))
    return table
