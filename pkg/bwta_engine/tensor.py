"""
Dense float/int matrices, seeded fixtures and the reference GEMMs.
Both GEMM operands are reduction-major: B is passed as [N x K].
"""

from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Tuple

import numpy as np
import structlog
from numba import njit

from .errors import DomainError, ShapeMismatchError

logger = structlog.get_logger(__name__)

# float64 sums of integers are exact below this bound, whatever the summation order
_FLOAT64_EXACT = 2**53


def as_dense(x, name: str = "matrix") -> np.ndarray:
    """Validate and convert to a C-contiguous 2-D float32 array."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim != 2:
        raise DomainError(f"{name} must be 2-D, got {arr.ndim}-D")
    if arr.size == 0:
        raise DomainError(f"{name} is empty: shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise DomainError(f"{name} contains NaN or Inf")
    return arr


def as_int(x, name: str = "matrix") -> np.ndarray:
    """Validate and convert to a C-contiguous 2-D int32 array."""
    arr = np.asarray(x)
    if arr.dtype.kind == "f":
        if not np.isfinite(arr).all() or not np.array_equal(arr, np.round(arr)):
            raise DomainError(f"{name} has non-integer entries")
    arr = np.ascontiguousarray(arr, dtype=np.int32)
    if arr.ndim != 2:
        raise DomainError(f"{name} must be 2-D, got {arr.ndim}-D")
    if arr.size == 0:
        raise DomainError(f"{name} is empty: shape {arr.shape}")
    return arr


def check_reduction(op: str, left: Tuple[int, int], right: Tuple[int, int]) -> None:
    if left[1] != right[1]:
        raise ShapeMismatchError(op, left, right, f"reduction dims {left[1]} != {right[1]}")


@njit(nogil=True, cache=True)
def _gemm_f32_loop(a, b, out):
    m_rows, k_dim = a.shape
    n_rows = b.shape[0]
    for m in range(m_rows):
        for n in range(n_rows):
            acc = np.float32(0.0)
            for k in range(k_dim):
                acc += a[m, k] * b[n, k]
            out[m, n] = acc


def gemm_f32(a, b) -> np.ndarray:
    """Naive float32 GEMM: out[m, n] = sum_k a[m, k] * b[n, k], k ascending."""
    a = as_dense(a, "A")
    b = as_dense(b, "B")
    check_reduction("gemm_f32", a.shape, b.shape)
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float32)
    _gemm_f32_loop(a, b, out)
    return out


def gemm_int_oracle(a, b) -> np.ndarray:
    """Exact integer GEMM used as ground truth for the popcount kernels."""
    a = as_int(a, "A")
    b = as_int(b, "B")
    check_reduction("gemm_int_oracle", a.shape, b.shape)
    bound = int(np.abs(a).max(initial=0)) * int(np.abs(b).max(initial=0)) * a.shape[1]
    if bound < _FLOAT64_EXACT:
        out = a.astype(np.float64) @ b.astype(np.float64).T
    else:
        out = a.astype(np.int64) @ b.astype(np.int64).T
    return out.astype(np.int32)


class DistributionKind(Enum):
    NORMAL = "normal"
    UNIFORM = "uniform"
    GRID = "grid"


@dataclass(frozen=True)
class Distribution:
    kind: DistributionKind
    params: Tuple[float, ...]

    @classmethod
    def normal(cls, mu: float = 0.0, sigma: float = 1.0) -> "Distribution":
        if sigma < 0:
            raise DomainError(f"sigma must be >= 0, got {sigma}")
        return cls(DistributionKind.NORMAL, (float(mu), float(sigma)))

    @classmethod
    def uniform(cls, lo: float = 0.0, hi: float = 1.0) -> "Distribution":
        if hi < lo:
            raise DomainError(f"uniform bounds reversed: [{lo}, {hi}]")
        return cls(DistributionKind.UNIFORM, (float(lo), float(hi)))

    @classmethod
    def grid(cls, values: Sequence[float]) -> "Distribution":
        values = tuple(float(v) for v in values)
        if not values:
            raise DomainError("grid distribution needs at least one value")
        return cls(DistributionKind.GRID, values)


def random_matrix(rows: int, cols: int, distribution: Distribution, seed: int) -> np.ndarray:
    """Reproducible float32 matrix; the generator is numpy's PCG64."""
    if rows < 1 or cols < 1:
        raise DomainError(f"random_matrix needs rows, cols >= 1, got {rows}x{cols}")
    rng = np.random.default_rng(seed)
    size = (rows, cols)
    if distribution.kind is DistributionKind.NORMAL:
        mu, sigma = distribution.params
        data = rng.normal(mu, sigma, size)
    elif distribution.kind is DistributionKind.UNIFORM:
        lo, hi = distribution.params
        data = rng.uniform(lo, hi, size)
    else:
        data = rng.choice(np.asarray(distribution.params), size=size)
    return np.ascontiguousarray(data, dtype=np.float32)


def random_ternary(rows: int, cols: int, seed: int) -> np.ndarray:
    """Integer matrix with entries drawn uniformly from {-1, 0, 1}."""
    return as_int(random_matrix(rows, cols, Distribution.grid((-1, 0, 1)), seed))


def random_signs(rows: int, cols: int, seed: int) -> np.ndarray:
    return as_int(random_matrix(rows, cols, Distribution.grid((-1, 1)), seed))
