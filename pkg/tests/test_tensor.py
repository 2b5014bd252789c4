"""
Unit tests for dense/int matrices, fixtures and the reference GEMMs.
"""

import numpy as np
import pytest

from bwta_engine.errors import DomainError, ShapeMismatchError
from bwta_engine.tensor import (
    Distribution,
    as_dense,
    as_int,
    gemm_f32,
    gemm_int_oracle,
    random_matrix,
    random_signs,
    random_ternary,
)


class TestValidation:
    def test_as_dense_rejects_vector(self):
        """1-D input is not a matrix."""
        with pytest.raises(DomainError):
            as_dense([1.0, 2.0])

    def test_as_dense_rejects_empty(self):
        """Zero-sized dimensions are rejected."""
        with pytest.raises(DomainError):
            as_dense(np.zeros((0, 3)))

    def test_as_dense_rejects_nan(self):
        """NaN and Inf never enter the pipeline."""
        with pytest.raises(DomainError):
            as_dense([[1.0, float('nan')]])

    def test_as_int_rejects_fractions(self):
        """Float input must hold whole numbers."""
        with pytest.raises(DomainError):
            as_int([[1.0, 0.5]])

    def test_as_int_accepts_whole_floats(self):
        """Whole floats convert to int32."""
        out = as_int([[1.0, -2.0]])
        assert out.dtype == np.int32
        assert out.tolist() == [[1, -2]]


class TestGemmF32:
    def test_trivial_dot(self):
        """[[1,2]] x [[3,4]]^T is 11."""
        assert gemm_f32([[1, 2]], [[3, 4]]).tolist() == [[11.0]]

    def test_identity(self):
        """Identity times identity is identity."""
        eye = np.eye(2, dtype=np.float32)
        assert np.array_equal(gemm_f32(eye, eye), eye)

    def test_matches_scalar_loop(self):
        """Bit-identical to a float32 scalar loop with k ascending."""
        a = random_matrix(7, 5, Distribution.normal(), seed=1)
        b = random_matrix(3, 5, Distribution.normal(), seed=2)
        expected = np.zeros((7, 3), dtype=np.float32)
        for m in range(7):
            for n in range(3):
                acc = np.float32(0.0)
                for k in range(5):
                    acc = np.float32(acc + a[m, k] * b[n, k])
                expected[m, n] = acc
        assert np.array_equal(gemm_f32(a, b), expected)

    def test_shape_mismatch(self):
        """Reduction dims must agree; the error is also a ValueError."""
        with pytest.raises(ShapeMismatchError) as exc_info:
            gemm_f32(np.ones((2, 3)), np.ones((2, 4)))
        assert isinstance(exc_info.value, ValueError)
        assert "(2, 3)" in str(exc_info.value)


class TestIntOracle:
    def test_signed_dot(self):
        """[1,-1,0,1] . [-1,-1,1,1] = 1."""
        assert gemm_int_oracle([[1, -1, 0, 1]], [[-1, -1, 1, 1]]).tolist() == [[1]]

    def test_zero_row(self):
        """A zero row gives zero."""
        assert gemm_int_oracle([[0, 0, 0]], [[1, -1, 1]]).tolist() == [[0]]

    def test_ones(self):
        """[1,1] . [1,1] = 2."""
        assert gemm_int_oracle([[1, 1]], [[1, 1]]).tolist() == [[2]]

    def test_dtype(self):
        """Oracle results are int32."""
        assert gemm_int_oracle([[1]], [[1]]).dtype == np.int32


class TestFixtures:
    def test_seed_determinism(self):
        """Same seed, same matrix."""
        a = random_matrix(4, 6, Distribution.normal(0, 1), seed=42)
        b = random_matrix(4, 6, Distribution.normal(0, 1), seed=42)
        assert np.array_equal(a, b)

    def test_different_seeds(self):
        """Different seeds give different matrices."""
        a = random_matrix(4, 6, Distribution.normal(), seed=1)
        b = random_matrix(4, 6, Distribution.normal(), seed=2)
        assert not np.array_equal(a, b)

    def test_grid_values(self):
        """Grid draws stay on the grid."""
        t = random_ternary(20, 30, seed=3)
        assert set(np.unique(t)) <= {-1, 0, 1}
        s = random_signs(20, 30, seed=3)
        assert set(np.unique(s)) <= {-1, 1}

    def test_normal_mean(self):
        """10^5 standard-normal samples average within 0.02 of zero."""
        a = random_matrix(100, 1000, Distribution.normal(), seed=0)
        assert abs(float(a.mean())) < 0.02

    def test_uniform_bounds(self):
        """Uniform draws stay inside [lo, hi)."""
        a = random_matrix(10, 10, Distribution.uniform(-2, 3), seed=0)
        assert a.min() >= -2 and a.max() < 3

    def test_bad_distributions(self):
        """Negative sigma, reversed bounds and empty grids are rejected."""
        with pytest.raises(DomainError):
            Distribution.normal(0, -1)
        with pytest.raises(DomainError):
            Distribution.uniform(1, 0)
        with pytest.raises(DomainError):
            Distribution.grid([])

    def test_bad_shape(self):
        """Zero rows are rejected."""
        with pytest.raises(DomainError):
            random_matrix(0, 3, Distribution.normal(), seed=0)
