"""Dense float32 linear algebra used throughout the package.

Matrices are plain 2-D ``numpy.float32`` arrays. Reductions (matmul, dot
products, norm statistics) accumulate in float64 and round back to float32
once, so results do not depend on BLAS blocking within a single call.
"""

from __future__ import annotations

import numpy as np

DEFAULT_EPS = 1e-6


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(ValueError):
    """An array contains NaN or Inf."""


def as_matrix(data, *, copy: bool = False) -> np.ndarray:
    """Coerce ``data`` to a finite, C-contiguous 2-D float32 array."""
    if copy:
        arr = np.array(data, dtype=np.float32, order="C")
    else:
        arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteError("matrix contains non-finite values")
    return arr


def as_vector(data, length: int | None = None) -> np.ndarray:
    vec = np.asarray(data, dtype=np.float32)
    if vec.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {vec.shape}")
    if length is not None and vec.shape[0] != length:
        raise ShapeError(f"expected vector of length {length}, got {vec.shape[0]}")
    if not np.isfinite(vec).all():
        raise NonFiniteError("vector contains non-finite values")
    return vec


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with float64 accumulation; batched leading dims of ``a`` allowed."""
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return out.astype(np.float32)


def linear(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w.T`` for a weight stored as (out_features, in_features)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"input dim {x.shape[-1]} does not match weight {w.shape}")
    out = np.matmul(x.astype(np.float64), w.astype(np.float64).T)
    return out.astype(np.float32)


def col_dot(a: np.ndarray, b: np.ndarray, j: int) -> float:
    """Sum over rows of ``a[:, j] * b[:, j]``."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if not 0 <= j < a.shape[1]:
        raise IndexError(f"column {j} out of range for {a.shape[1]} columns")
    return float(np.dot(a[:, j].astype(np.float64), b[:, j].astype(np.float64)))


def col_dots(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorised ``col_dot`` over every column, float64 result."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return np.einsum("ij,ij->j", a.astype(np.float64), b.astype(np.float64))


def rmsnorm(x: np.ndarray, gamma: np.ndarray, bias: np.ndarray | None = None,
            eps: float = DEFAULT_EPS) -> np.ndarray:
    """RMS normalisation over the last axis, then ``* gamma + bias``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or (bias is not None and bias.shape != (d,)):
        raise ShapeError("gamma/bias length must equal the feature dimension")
    if eps <= 0:
        raise ValueError("eps must be positive")
    x64 = x.astype(np.float64)
    inv = 1.0 / np.sqrt(np.mean(x64 * x64, axis=-1, keepdims=True) + eps)
    y = (x64 * inv).astype(np.float32) * gamma
    if bias is not None:
        y = y + bias
    return y.astype(np.float32)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    if x.size == 0:
        raise ShapeError("softmax of empty input")
    x64 = x.astype(np.float64)
    x64 = x64 - x64.max(axis=-1, keepdims=True)
    e = np.exp(x64)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def silu(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    return (x64 / (1.0 + np.exp(-x64))).astype(np.float32)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return (a + b).astype(np.float32)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return (a * b).astype(np.float32)


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.T)


def row_mean(x: np.ndarray) -> np.ndarray:
    """Per-column mean taken across rows (tokens), float64."""
    if x.shape[0] == 0:
        raise ShapeError("mean over zero rows")
    return x.astype(np.float64).mean(axis=0)


def row_var(x: np.ndarray) -> np.ndarray:
    """Per-column population variance (divides by the row count), float64."""
    if x.shape[0] == 0:
        raise ShapeError("variance over zero rows")
    x64 = x.astype(np.float64)
    return ((x64 - x64.mean(axis=0)) ** 2).mean(axis=0)
