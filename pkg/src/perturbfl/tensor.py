"""Dense float64 matrix/vector helpers built around the Hadamard product.

Matrices and vectors are plain ``numpy`` arrays (2-D and 1-D, float64).
Every public function validates shapes, returns a fresh array and refuses to
hand back non-finite values.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "as_matrix",
    "as_vector",
    "hadamard",
    "hadamard_reciprocal",
    "matvec",
    "relu",
    "diag",
    "max_rel_error",
]


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise DomainError(f"{op} produced non-finite values")
    return out


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return _finite(m, "as_matrix")


def as_vector(v) -> np.ndarray:
    x = np.asarray(v, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {x.shape}")
    return _finite(x, "as_vector")


def hadamard(a, b) -> np.ndarray:
    """Elementwise product of two same-shaped arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shape mismatch {a.shape} vs {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a * b
    return _finite(out, "hadamard")


def hadamard_reciprocal(a) -> np.ndarray:
    """Entrywise reciprocal ``1/a``; every entry must be nonzero."""
    a = np.asarray(a, dtype=np.float64)
    if np.any(a == 0.0):
        raise DomainError("hadamard_reciprocal: zero entry")
    with np.errstate(over="ignore"):
        out = 1.0 / a
    return _finite(out, "hadamard_reciprocal")


def matvec(a, v) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if a.ndim != 2 or v.ndim != 1 or a.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: cannot multiply {a.shape} by {v.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ v
    return _finite(out, "matvec")


def relu(v) -> np.ndarray:
    # relu(0) = 0, and -0.0 is flushed to +0.0
    v = np.asarray(v, dtype=np.float64)
    return np.where(v > 0.0, v, 0.0)


def diag(v) -> np.ndarray:
    return np.diag(as_vector(v))


def max_rel_error(actual, expected, floor: float = 1e-300) -> float:
    """Normwise relative error ``max|actual - expected| / max|expected|``.

    Used throughout the test battery; an elementwise ratio is meaningless
    for coordinates that are (nearly) zero in the reference.
    """
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ShapeError(f"max_rel_error: shape mismatch {actual.shape} vs {expected.shape}")
    if expected.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(expected))), floor)
    return float(np.max(np.abs(actual - expected))) / scale
