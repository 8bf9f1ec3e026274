import subprocess
import sys

import numpy as np
import pytest

from xagent.errors import ArgumentError, NumericError, ShapeError
from xagent.numerics import (
    Rng,
    fd_gradient,
    gather_rows,
    l2_normalize_rows,
    matmul,
    sigmoid,
    softmax_rows,
    topk,
)


class TestMatmul:
    def test_identity(self):
        m = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(matmul(np.eye(2), m), m)

    def test_hand_case(self):
        out = matmul([[1, 2], [3, 4]], [[1], [1]])
        assert np.array_equal(out, [[3], [7]])

    def test_matches_triple_loop_oracle(self):
        rng = Rng(7)
        a = rng.normal((5, 7))
        b = rng.normal((7, 3))
        expected = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                for k in range(7):
                    expected[i, j] += a[i, k] * b[k, j]
        assert np.abs(matmul(a, b) - expected).max() < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rejects_non_finite(self):
        bad = np.array([[1.0, np.nan], [0.0, 1.0]])
        with pytest.raises(NumericError):
            matmul(bad, np.eye(2))

    @pytest.mark.parametrize("seed", range(5))
    def test_associativity(self, seed):
        rng = Rng(seed)
        a, b, c = rng.normal((4, 5)), rng.normal((5, 6)), rng.normal((6, 3))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        assert np.abs(left - right).max() / np.abs(left).max() < 1e-9


class TestSoftmaxRows:
    def test_symmetry(self):
        assert np.allclose(softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]], atol=1e-15)

    def test_large_magnitude_stable(self):
        out = softmax_rows([[1000.0, 0.0]])
        assert np.all(np.isfinite(out))
        assert out[0, 0] > 1.0 - 1e-12
        assert out[0, 1] < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_rows_sum_to_one(self, seed):
        m = Rng(seed).uniform((4, 6), -1e3, 1e3)
        out = softmax_rows(m)
        assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-9


class TestL2NormalizeRows:
    def test_three_four_five(self):
        assert np.allclose(l2_normalize_rows([[3.0, 4.0]]), [[0.6, 0.8]], atol=1e-15)

    def test_zero_row_stays_zero(self):
        out = l2_normalize_rows([[0.0, 0.0]])
        assert np.array_equal(out, [[0.0, 0.0]])

    def test_requires_positive_eps(self):
        with pytest.raises(ArgumentError):
            l2_normalize_rows([[1.0, 2.0]], eps=0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_unit_norms(self, seed):
        m = Rng(seed).normal((6, 4))
        norms = np.linalg.norm(l2_normalize_rows(m), axis=1)
        assert np.abs(norms - 1.0).max() < 1e-9


class TestTopk:
    def test_largest_ordering(self):
        assert topk([0.2, 0.5, 0.3], 2, largest=True).tolist() == [1, 2]

    def test_smallest_ordering(self):
        assert topk([0.2, 0.5, 0.3], 2, largest=False).tolist() == [0, 2]

    def test_tie_break_lower_index(self):
        assert topk([0.4, 0.4, 0.1], 1, largest=True).tolist() == [0]
        assert topk([0.1, 0.4, 0.1], 1, largest=False).tolist() == [0]

    def test_k_too_large(self):
        with pytest.raises(ArgumentError):
            topk([1.0, 2.0], 3)

    @pytest.mark.parametrize("seed", range(5))
    def test_largest_equals_smallest_of_negated(self, seed):
        v = Rng(seed).permutation(50).astype(float)  # all distinct
        k = 7
        assert topk(v, k, largest=True).tolist() == topk(-v, k, largest=False).tolist()


class TestGatherRows:
    def test_identity_permutation(self):
        m = Rng(0).normal((4, 3))
        assert np.array_equal(gather_rows(m, np.arange(4)), m)

    def test_hand_case(self):
        out = gather_rows([[1.0], [2.0], [3.0]], [2, 0])
        assert np.array_equal(out, [[3.0], [1.0]])

    def test_round_trip_through_inverse_permutation(self):
        m = Rng(1).normal((6, 2))
        perm = Rng(2).permutation(6)
        inverse = np.argsort(perm)
        assert np.array_equal(gather_rows(gather_rows(m, perm), inverse), m)

    def test_out_of_range(self):
        with pytest.raises(ArgumentError):
            gather_rows(np.ones((2, 2)), [0, 2])


class TestFdGradient:
    def test_quadratic(self):
        grad = fd_gradient(lambda x: float(x[0] ** 2), np.array([3.0]), h=1e-4)
        assert abs(grad[0] - 6.0) < 1e-6

    def test_constant(self):
        grad = fd_gradient(lambda x: 1.5, np.ones((2, 3)), h=1e-4)
        assert np.array_equal(grad, np.zeros((2, 3)))

    def test_requires_positive_h(self):
        with pytest.raises(ArgumentError):
            fd_gradient(lambda x: 0.0, np.ones(2), h=0.0)

    def test_non_finite_objective(self):
        with pytest.raises(NumericError):
            fd_gradient(lambda x: float("nan"), np.ones(1))


class TestSigmoid:
    def test_extremes_stable(self):
        out = sigmoid(np.array([[-1000.0, 0.0, 1000.0]]))
        assert np.all(np.isfinite(out))
        assert abs(out[0, 1] - 0.5) < 1e-15


class TestRng:
    def test_same_seed_same_stream(self):
        assert Rng(123).bytes(64) == Rng(123).bytes(64)

    def test_children_are_independent_streams(self):
        root = Rng(5)
        assert root.child(0).bytes(32) != root.child(1).bytes(32)
        assert root.child(0).bytes(32) == Rng(5).child(0).bytes(32)

    def test_byte_identical_across_processes(self):
        code = (
            "from xagent.numerics import Rng; import sys;"
            "sys.stdout.write(Rng(99).bytes(48).hex())"
        )
        runs = [
            subprocess.run([sys.executable, "-c", code], capture_output=True, text=True)
            for _ in range(2)
        ]
        assert runs[0].stdout == runs[1].stdout
        assert runs[0].stdout == Rng(99).bytes(48).hex()
