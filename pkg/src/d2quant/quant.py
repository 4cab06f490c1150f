"""Group-wise asymmetric uniform (round-to-nearest) weight quantization.

Groups run along the input (column) dimension: row ``i`` of a weight with
``cols`` columns is split into ``cols // group_size`` contiguous groups, each
with its own scale and zero-point.

Scale arithmetic is pinned so that results are bit-reproducible: the scale is
computed in float64 and stored as float32, and codes are derived from the
*stored* float32 scale with float64 division. Dequantization multiplies in
float64 and rounds to float32 once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, as_matrix

PER_CHANNEL = -1
SUPPORTED_BITS = (2, 3, 4, 8)


class QuantConfigError(ValueError):
    """Bit-width or group size is unusable for the given weight."""


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 2
    group_size: int = 128

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise QuantConfigError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.group_size != PER_CHANNEL and self.group_size <= 0:
            raise QuantConfigError(f"group_size must be positive or PER_CHANNEL, got {self.group_size}")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    def groups_for(self, cols: int) -> int:
        """Group width for a weight with ``cols`` input columns."""
        if self.group_size == PER_CHANNEL:
            return cols
        if cols % self.group_size:
            raise QuantConfigError(
                f"group_size {self.group_size} does not divide input dimension {cols}")
        return self.group_size


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    codes: np.ndarray        # uint8 [rows, cols]
    scales: np.ndarray       # float32 [rows, n_groups]
    zero_points: np.ndarray  # uint8 [rows, n_groups]
    bits: int
    group_size: int          # concrete width, never PER_CHANNEL

    def __post_init__(self):
        rows, cols = self.codes.shape
        if self.group_size <= 0 or cols % self.group_size:
            raise ShapeError(f"group_size {self.group_size} does not divide {cols}")
        n_groups = cols // self.group_size
        if self.scales.shape != (rows, n_groups) or self.zero_points.shape != (rows, n_groups):
            raise ShapeError("scales/zero_points must be [rows, n_groups]")
        if self.codes.dtype != np.uint8 or self.zero_points.dtype != np.uint8:
            raise TypeError("codes and zero_points must be uint8")
        if self.scales.dtype != np.float32:
            raise TypeError("scales must be float32")
        qmax = (1 << self.bits) - 1
        if self.codes.max(initial=0) > qmax or self.zero_points.max(initial=0) > qmax:
            raise ValueError(f"codes or zero-points exceed {qmax}")
        # Folding a negative column scale is legal, so only zero is excluded.
        if not np.isfinite(self.scales).all() or (self.scales == 0).any():
            raise ValueError("scales must be finite and nonzero")

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    @property
    def n_groups(self) -> int:
        return self.scales.shape[1]

    def dequantize(self) -> np.ndarray:
        return dequantize(self)

    def same_as(self, other: "QuantizedTensor") -> bool:
        """Bit-exact equality of every field."""
        return (isinstance(other, QuantizedTensor)
                and self.bits == other.bits and self.group_size == other.group_size
                and np.array_equal(self.codes, other.codes)
                and self.scales.tobytes() == other.scales.tobytes()
                and np.array_equal(self.zero_points, other.zero_points))


@dataclass(frozen=True, eq=False)
class IdentityQuantized:
    """Passthrough slot: behaves like a quantized tensor but stores ``w`` as-is."""
    weight: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def dequantize(self) -> np.ndarray:
        return self.weight


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (exact for all floats)."""
    t = np.trunc(x)
    frac = x - t  # exact in IEEE arithmetic
    return t + np.where(np.abs(frac) >= 0.5, np.sign(x), 0.0)


def _grouped(w: np.ndarray, width: int) -> np.ndarray:
    rows, cols = w.shape
    return w.reshape(rows, cols // width, width)


def quantize(w, cfg: QuantConfig) -> QuantizedTensor:
    """Min-max quantize ``w`` per (row, group) with the range widened to include 0."""
    w = as_matrix(w)
    width = cfg.groups_for(w.shape[1])
    qmax = cfg.qmax
    g = _grouped(w, width).astype(np.float64)
    lo = np.minimum(g.min(axis=2), 0.0)
    hi = np.maximum(g.max(axis=2), 0.0)
    span = hi - lo
    scales = np.where(span == 0.0, 1.0, span / qmax).astype(np.float32)
    s64 = scales.astype(np.float64)
    zeros = np.clip(-round_half_away(lo / s64), 0, qmax)
    codes = np.clip(round_half_away(g / s64[..., None]) + zeros[..., None], 0, qmax)
    return QuantizedTensor(
        codes=codes.reshape(w.shape).astype(np.uint8),
        scales=scales,
        zero_points=zeros.astype(np.uint8),
        bits=cfg.bits,
        group_size=width,
    )


def dequantize(q) -> np.ndarray:
    """``scale * (code - zero_point)`` broadcast over each group."""
    if isinstance(q, IdentityQuantized):
        return q.weight
    rows, cols = q.codes.shape
    codes = _grouped(q.codes, q.group_size).astype(np.float64)
    out = q.scales.astype(np.float64)[..., None] * (codes - q.zero_points.astype(np.float64)[..., None])
    return out.reshape(rows, cols).astype(np.float32)


def identity_quantize(w) -> IdentityQuantized:
    return IdentityQuantized(as_matrix(w, copy=True))


def effective(slot) -> np.ndarray:
    """Full-precision view of a weight slot (plain matrix or quantized)."""
    if isinstance(slot, np.ndarray):
        return slot
    return slot.dequantize()


def reconstruction_error(w: np.ndarray, w_hat: np.ndarray) -> float:
    """Squared Frobenius norm of ``w - w_hat`` in float64."""
    d = w.astype(np.float64) - w_hat.astype(np.float64)
    return float(np.sum(d * d))


GROUP_OVERHEAD_BITS = 32  # fp16 scale + fp16 zero-point per group, nominal


def theoretical_bits_per_weight(bits: int, group_size: int) -> float:
    """Nominal storage cost per weight including the per-group overhead."""
    return bits + GROUP_OVERHEAD_BITS / group_size


def compression_ratio(bits: int, group_size: int, reference_bits: int = 16) -> float:
    return reference_bits / theoretical_bits_per_weight(bits, group_size)
