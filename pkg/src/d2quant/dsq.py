"""Dual-scale quantization of MLP down-projections.

A down-projection ``W`` (d_model x H) is approximated as ``Q(W / s) * s`` where
``s`` is a per-column scale over the H hidden channels. ``Q`` is the plain
group-wise quantizer. The column scale is later folded into the rows of the
already-quantized up-projection, which costs nothing at inference because

    (g * (x @ U.T)) @ (D * s).T  ==  (g * (x @ (s[:, None] * U).T)) @ D.T

The same identity underlies the full-precision up/down rescaling used by the
static-smoothing baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import ShapeError, as_matrix, col_dots, linear, silu
from .quant import QuantConfig, QuantizedTensor, dequantize, quantize, reconstruction_error

log = logging.getLogger(__name__)

DENOM_EPS = 1e-12
EARLY_STOP_RTOL = 1e-6
DEFAULT_ITERS = 15


@dataclass(frozen=True)
class UpDownScaling:
    eta: np.ndarray

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=np.float64)
        if eta.ndim != 1 or not np.isfinite(eta).all() or (eta <= 0).any():
            raise ValueError("eta must be a vector of positive finite reals")
        object.__setattr__(self, "eta", eta)


@dataclass
class DualScaleResult:
    q_down: QuantizedTensor
    col_scale: np.ndarray                 # float64 [H]
    objective_trace: list[float]          # best objective after each iteration, [0] is plain RTN
    iterations_run: int
    # per iteration: (objective after the Q-step, objective after the s-step)
    steps: list[tuple[float, float]] = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]

    def reconstruct(self) -> np.ndarray:
        return (dequantize(self.q_down).astype(np.float64) * self.col_scale).astype(np.float32)


def mlp_forward(x: np.ndarray, w_gate: np.ndarray, w_up: np.ndarray, w_down: np.ndarray,
                col_scale: np.ndarray | None = None) -> np.ndarray:
    """Gated MLP: ``(silu(x Wg^T) * (x Wu^T)) Wd^T``, optional explicit column scale."""
    h = silu(linear(x, w_gate)) * linear(x, w_up)
    if col_scale is not None:
        h = (h.astype(np.float64) * col_scale).astype(np.float32)
    return linear(h, w_down)


def apply_updown_scaling(w_up, w_gate, w_down, eta: UpDownScaling):
    """Return ``(diag(eta) @ W_up, W_down @ diag(eta)^-1)``; the gate is unaffected."""
    w_up, w_gate, w_down = as_matrix(w_up), as_matrix(w_gate), as_matrix(w_down)
    h = w_up.shape[0]
    if w_gate.shape != w_up.shape or w_down.shape != (w_up.shape[1], h):
        raise ShapeError(f"incompatible MLP shapes up={w_up.shape} gate={w_gate.shape} down={w_down.shape}")
    if eta.eta.shape != (h,):
        raise ShapeError(f"eta length {eta.eta.shape[0]} != hidden size {h}")
    up = (w_up.astype(np.float64) * eta.eta[:, None]).astype(np.float32)
    down = (w_down.astype(np.float64) / eta.eta[None, :]).astype(np.float32)
    return up, down


def static_smooth_eta(w_down) -> UpDownScaling:
    """Per-column max-abs equalisation of the down-projection."""
    w = np.abs(as_matrix(w_down).astype(np.float64))
    colmax = w.max(axis=0)
    mean = colmax.mean()
    if mean == 0.0:
        return UpDownScaling(np.ones_like(colmax))
    eta = np.where(colmax > 0, colmax / mean, 1.0)
    return UpDownScaling(eta)


def _s_step(w64: np.ndarray, qt: np.ndarray, prev: np.ndarray) -> np.ndarray:
    num = col_dots(w64, qt)
    den = col_dots(qt, qt)
    s = prev.copy()
    ok = np.abs(den) >= DENOM_EPS
    s[ok] = num[ok] / den[ok]
    s[np.abs(den) < DENOM_EPS] = 1.0
    # zero numerator: optimum is 0, which is not foldable; keep the previous value
    s[ok & (num == 0.0)] = prev[ok & (num == 0.0)]
    return s


def _objective(w64: np.ndarray, qt: np.ndarray, s: np.ndarray) -> float:
    d = w64 - qt.astype(np.float64) * s
    return float(np.sum(d * d))


def dsq_quantize(w_down, cfg: QuantConfig, iters: int = DEFAULT_ITERS,
                 early_stop: bool = True) -> DualScaleResult:
    """Alternate a quantization step on ``W / s`` with a closed-form column-scale step.

    Iteration 0 is plain quantization with ``s = 1``. Each later iteration
    re-quantizes ``W / s`` and then sets every ``s_j`` to the least-squares
    ratio ``<W_j, Q_j> / <Q_j, Q_j>``. The lowest-objective iterate is returned,
    so the result is never worse than plain quantization.
    """
    if iters < 0:
        raise ValueError("iters must be non-negative")
    w = as_matrix(w_down)
    w64 = w.astype(np.float64)
    cols = w.shape[1]

    s = np.ones(cols)
    q = quantize(w, cfg)
    qt = dequantize(q)
    obj = _objective(w64, qt, s)
    best = (obj, q, s.copy())
    trace = [obj]
    steps: list[tuple[float, float]] = []
    prev_obj = obj
    ran = 0
    for it in range(1, iters + 1):
        # iteration 1 reuses the s = 1 quantization from iteration 0
        if it > 1:
            q = quantize((w64 / s).astype(np.float32), cfg)
            qt = dequantize(q)
        before = _objective(w64, qt, s)
        s = _s_step(w64, qt.astype(np.float64), s)
        obj = _objective(w64, qt, s)
        steps.append((before, obj))
        ran = it
        if obj < best[0]:
            best = (obj, q, s.copy())
        trace.append(best[0])
        if early_stop and abs(prev_obj - obj) <= EARLY_STOP_RTOL * prev_obj:
            break
        prev_obj = obj
    log.debug("dsq: %d iterations, objective %.6g -> %.6g", ran, trace[0], best[0])
    return DualScaleResult(q_down=best[1], col_scale=best[2], objective_trace=trace,
                           iterations_run=ran, steps=steps)


def fold_scale(q_up: QuantizedTensor, col_scale) -> QuantizedTensor:
    """Multiply row ``i`` of the up-projection's group scales by ``col_scale[i]``."""
    s = np.asarray(col_scale, dtype=np.float64)
    if s.shape != (q_up.shape[0],):
        raise ShapeError(f"col_scale length {s.shape} != up-projection rows {q_up.shape[0]}")
    if (s == 0).any() or not np.isfinite(s).all():
        raise ValueError("col_scale entries must be finite and nonzero")
    scales = (q_up.scales.astype(np.float64) * s[:, None]).astype(np.float32)
    return QuantizedTensor(codes=q_up.codes, scales=scales, zero_points=q_up.zero_points,
                           bits=q_up.bits, group_size=q_up.group_size)


def plain_objective(w_down, cfg: QuantConfig) -> float:
    w = as_matrix(w_down)
    return reconstruction_error(w, dequantize(quantize(w, cfg)))
