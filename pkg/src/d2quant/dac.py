"""Deviation statistics and mean-shift bias correction at normalization outputs.

For full-precision and quantized activations ``y_fp``, ``y_q`` (tokens x
features) the deviation ``y_fp - y_q`` is summarised per feature by its mean
``mu`` and population variance ``sigma2``. Adding ``mu`` to the quantized
output removes ``mu^2 / (mu^2 + sigma2)`` of the per-feature MSE on the data
it was measured on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError

SNR_EPS = 1e-12
REDUCTION_FLOOR = 1e-20


@dataclass
class DeviationStats:
    mu: np.ndarray          # float64 [H]
    sigma2: np.ndarray      # float64 [H]
    token_count: int

    @property
    def snr_diag(self) -> np.ndarray:
        """``|mu| / (sigma2 + eps)``, the diagnostic ratio used for site comparisons."""
        return np.abs(self.mu) / (self.sigma2 + SNR_EPS)

    @property
    def reduction(self) -> np.ndarray:
        return predict_reduction(self)

    @property
    def mse(self) -> np.ndarray:
        return self.mu ** 2 + self.sigma2


class DeviationAccumulator:
    """Streaming per-feature mean/variance of ``y_fp - y_q`` (Chan/Welford merge).

    Batches are merged in the order they are added, so the result is a
    deterministic function of the batch sequence.
    """

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, y_fp: np.ndarray, y_q: np.ndarray) -> None:
        d = _deviation(y_fp, y_q)
        if d.shape[1] != self.mean.shape[0]:
            raise ShapeError(f"feature dim {d.shape[1]} != {self.mean.shape[0]}")
        nb = d.shape[0]
        if nb == 0:
            return
        mb = d.mean(axis=0)
        m2b = ((d - mb) ** 2).sum(axis=0)
        n = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + m2b + delta ** 2 * (self.n * nb / n)
        self.n = n

    def stats(self) -> DeviationStats:
        if self.n == 0:
            raise ValueError("no tokens accumulated")
        return DeviationStats(mu=self.mean.copy(), sigma2=np.maximum(self.m2 / self.n, 0.0),
                              token_count=self.n)


def _deviation(y_fp: np.ndarray, y_q: np.ndarray) -> np.ndarray:
    if y_fp.shape != y_q.shape:
        raise ShapeError(f"shape mismatch {y_fp.shape} vs {y_q.shape}")
    y_fp = y_fp.reshape(-1, y_fp.shape[-1])
    y_q = y_q.reshape(-1, y_q.shape[-1])
    return y_fp.astype(np.float64) - y_q.astype(np.float64)


def deviation_stats(y_fp: np.ndarray, y_q: np.ndarray) -> DeviationStats:
    d = _deviation(y_fp, y_q)
    if d.shape[0] == 0:
        raise ShapeError("deviation over zero tokens")
    mu = d.mean(axis=0)
    sigma2 = ((d - mu) ** 2).mean(axis=0)
    return DeviationStats(mu=mu, sigma2=sigma2, token_count=d.shape[0])


def calibrate_bias(y_fp: np.ndarray, y_q: np.ndarray) -> np.ndarray:
    """Mean deviation per feature; add it to ``y_q`` to re-centre on ``y_fp``."""
    return deviation_stats(y_fp, y_q).mu


def predict_reduction(stats: DeviationStats) -> np.ndarray:
    total = stats.mu ** 2 + stats.sigma2
    safe = np.where(total < REDUCTION_FLOOR, 1.0, total)
    return np.where(total < REDUCTION_FLOOR, 0.0, stats.mu ** 2 / safe)


def realized_reduction(y_fp: np.ndarray, y_q: np.ndarray, bias) -> np.ndarray:
    """``1 - MSE(y_fp, y_q + bias) / MSE(y_fp, y_q)`` per feature (0 where the MSE is 0)."""
    d = _deviation(y_fp, y_q)
    b = np.asarray(bias, dtype=np.float64)
    if b.shape != (d.shape[1],):
        raise ShapeError(f"bias length {b.shape} != feature dim {d.shape[1]}")
    before = np.mean(d * d, axis=0)
    after = np.mean((d - b) ** 2, axis=0)
    safe = np.where(before == 0.0, 1.0, before)
    return np.where(before == 0.0, 0.0, 1.0 - after / safe)
