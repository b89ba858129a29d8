"""Dense float64 linear algebra helpers and seeded sampling.

Vectors and matrices are plain ``numpy.ndarray`` objects (1-D and 2-D,
row-major, float64). Randomness always flows through an explicit
``numpy.random.Generator``; nothing here touches global random state.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when array shapes are incompatible."""


def as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector has non-finite elements")
    return arr


def as_matrix(m) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeError(f"expected a non-empty matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix has non-finite elements")
    return np.ascontiguousarray(arr)


def mat_vec(M, v) -> np.ndarray:
    """Return ``M @ v`` after checking ``M.cols == len(v)``."""
    M = as_matrix(M)
    v = as_vector(v)
    if M.shape[1] != v.shape[0]:
        raise ShapeError(
            f"cannot multiply matrix of shape {M.shape} by vector of shape {v.shape}"
        )
    return M @ v


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def sample_gaussian(rng: np.random.Generator, mean: float, std: float, n: int) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    if std == 0:
        return np.full(n, float(mean))
    return rng.normal(mean, std, size=n)


def sample_uniform_int(rng: np.random.Generator, lo: int, hi: int) -> int:
    """Uniform draw from ``{lo, ..., hi}`` (inclusive)."""
    if lo > hi:
        raise ValueError(f"empty range: lo={lo} > hi={hi}")
    return int(rng.integers(lo, hi, endpoint=True))
