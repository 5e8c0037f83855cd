"""Array plumbing: matmul contracts, softmax stability, the finite-difference
oracle, and counter-based randomness."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elliptical.numerics import (
    EvaluationError,
    ParameterError,
    ShapeError,
    as_matrix,
    derive_rng,
    finite_diff_jacobian,
    make_rng,
    matmul,
    softmax_rows,
)


class TestAsMatrix:
    def test_reshapes_flat_data(self):
        m = as_matrix([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], rows=2, cols=3)
        assert m.shape == (2, 3)
        assert m[1, 0] == 4.0

    def test_rejects_size_mismatch(self):
        with pytest.raises(ShapeError):
            as_matrix([1.0, 2.0, 3.0], rows=2, cols=2)

    def test_rejects_non_finite(self):
        with pytest.raises(ShapeError):
            as_matrix([[1.0, np.nan]])
        with pytest.raises(ShapeError):
            as_matrix([[np.inf, 1.0]])


class TestMatmul:
    def test_identity_is_neutral(self):
        a = make_rng(0).standard_normal((4, 4))
        assert np.array_equal(matmul(np.eye(4), a), a)

    def test_hand_product(self):
        out = matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
        assert np.array_equal(out, [[3.0], [7.0]])

    def test_zero_annihilates(self):
        a = make_rng(1).standard_normal((3, 5))
        assert np.all(matmul(np.zeros((2, 3)), a) == 0.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_associativity(self, seed):
        rng = make_rng(seed)
        dims = rng.integers(1, 7, size=4)
        a = rng.standard_normal((dims[0], dims[1]))
        b = rng.standard_normal((dims[1], dims[2]))
        c = rng.standard_normal((dims[2], dims[3]))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-12)


class TestSoftmaxRows:
    def test_equal_entries_give_uniform(self):
        out = softmax_rows(np.full((3, 5), 2.7))
        np.testing.assert_allclose(out, 1.0 / 5.0, atol=1e-15)

    def test_hand_case(self):
        out = softmax_rows(np.array([[0.0, np.log(3.0)]]))
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-15)

    def test_shift_invariance(self):
        rng = make_rng(2)
        z = rng.standard_normal((4, 6))
        shifted = z + rng.standard_normal((4, 1))
        np.testing.assert_allclose(softmax_rows(z), softmax_rows(shifted), atol=1e-12)

    def test_masked_entries_become_exact_zeros(self):
        out = softmax_rows(np.array([[1.0, -np.inf, 0.5]]))
        assert out[0, 1] == 0.0
        assert abs(out[0].sum() - 1.0) < 1e-12

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_rows_are_distributions(self, seed):
        rng = make_rng(seed)
        z = rng.uniform(-50.0, 50.0, (int(rng.integers(1, 8)), int(rng.integers(1, 8))))
        out = softmax_rows(z)
        assert np.all(out >= 0.0) and np.all(out <= 1.0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_many_random_rows_sum_to_one(self):
        rng = make_rng(3)
        for _ in range(1000):
            z = rng.uniform(-30, 30, (2, 5))
            out = softmax_rows(z)
            np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
            assert np.all((out >= 0.0) & (out <= 1.0))


class TestFiniteDiffJacobian:
    def test_identity_function(self):
        x = make_rng(4).standard_normal(5)
        jac = finite_diff_jacobian(lambda v: v, x)
        np.testing.assert_allclose(jac, np.eye(5), atol=1e-10)

    def test_linear_map_recovered(self):
        rng = make_rng(5)
        a = rng.standard_normal((3, 4))
        x = rng.standard_normal(4)
        jac = finite_diff_jacobian(lambda v: a @ v, x)
        np.testing.assert_allclose(jac, a, atol=1e-10)

    def test_hand_case(self):
        jac = finite_diff_jacobian(
            lambda v: np.array([v[0] ** 2, v[1]]), np.array([3.0, 1.0]), h=1e-4
        )
        np.testing.assert_allclose(jac, [[6.0, 0.0], [0.0, 1.0]], atol=1e-6)

    def test_non_finite_output_raises(self):
        with pytest.raises(EvaluationError):
            finite_diff_jacobian(lambda v: np.array([np.nan, 0.0]), np.ones(2))

    def test_rejects_bad_step(self):
        with pytest.raises(ParameterError):
            finite_diff_jacobian(lambda v: v, np.ones(2), h=0.0)


class TestRng:
    def test_same_seed_same_stream(self):
        a = make_rng(123).standard_normal(100)
        b = make_rng(123).standard_normal(100)
        assert np.array_equal(a, b)

    def test_distinct_seeds_differ(self):
        a = make_rng(1).standard_normal(100)
        b = make_rng(2).standard_normal(100)
        assert not np.array_equal(a, b)

    def test_derived_streams_are_independent(self):
        a = derive_rng(7, 1, 0).standard_normal(100)
        b = derive_rng(7, 1, 1).standard_normal(100)
        c = derive_rng(7, 2, 0).standard_normal(100)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.35

    def test_derivation_is_stable(self):
        assert np.array_equal(
            derive_rng(42, 3, 9).standard_normal(8),
            derive_rng(42, 3, 9).standard_normal(8),
        )
