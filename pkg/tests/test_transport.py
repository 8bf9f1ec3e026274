import math

import numpy as np
import pytest

from xagent.errors import ArgumentError, DegenerateInputError, NumericError, ShapeError
from xagent.numerics import Rng
from xagent.transport import (
    TransportProblem,
    cost_matrix,
    plan_entropy,
    sinkhorn,
    uniform_problem,
)


def reference_sinkhorn(cost, mu, nu, eps, iters):
    """Scalar-loop two-sided scaling, multiplicative form, as an oracle."""
    nr, nc = cost.shape
    kernel = [[math.exp(-cost[i][j] / eps) for j in range(nc)] for i in range(nr)]
    a = [1.0] * nr
    b = [1.0] * nc
    for _ in range(iters):
        for i in range(nr):
            a[i] = mu[i] / sum(kernel[i][j] * b[j] for j in range(nc))
        for j in range(nc):
            b[j] = nu[j] / sum(kernel[i][j] * a[i] for i in range(nr))
    return np.array([[a[i] * kernel[i][j] * b[j] for j in range(nc)] for i in range(nr)])


class TestCostMatrix:
    def test_dot_self_similarity_is_zero(self):
        row = np.array([[1.0, 2.0, 2.0]])
        cost = cost_matrix(row, row, "dot")
        assert abs(cost[0, 0]) < 1e-15

    def test_dot_orthogonal_unit_rows(self):
        f_t = np.array([[1.0, 0.0]])
        key = np.array([[0.0, 1.0]])
        assert abs(cost_matrix(f_t, key, "dot")[0, 0] - 1.0) < 1e-15

    def test_dot_range(self):
        rng = Rng(0)
        cost = cost_matrix(rng.normal((4, 6)), rng.normal((9, 6)), "dot")
        assert cost.min() >= 0.0 and cost.max() <= 2.0

    def test_mae_identical_rows(self):
        row = np.array([[0.3, -0.7, 2.0]])
        assert cost_matrix(row, row, "mae")[0, 0] == 0.0

    def test_mse_constant_offset(self):
        f_t = np.array([[0.0, 0.0, 0.0]])
        key = f_t + 0.4
        assert abs(cost_matrix(f_t, key, "mse")[0, 0] - 0.4**2) < 1e-15

    @pytest.mark.parametrize("variant", ["dot", "mae", "mse"])
    def test_matches_elementwise_oracle(self, variant):
        rng = Rng(3)
        f_t = rng.normal((3, 4))
        key = rng.normal((5, 4))
        cost = cost_matrix(f_t, key, variant)
        max_t = max(np.linalg.norm(f_t[i]) for i in range(3))
        max_k = max(np.linalg.norm(key[j]) for j in range(5))
        for i in range(3):
            for j in range(5):
                if variant == "dot":
                    want = 1.0 - float(f_t[i] @ key[j]) / (max_t * max_k)
                elif variant == "mae":
                    want = float(np.mean(np.abs(f_t[i] - key[j])))
                else:
                    want = float(np.mean((f_t[i] - key[j]) ** 2))
                assert abs(cost[i, j] - want) < 1e-12

    def test_all_zero_input_degenerate(self):
        with pytest.raises(DegenerateInputError):
            cost_matrix(np.zeros((2, 3)), np.ones((4, 3)), "dot")

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            cost_matrix(np.ones((2, 3)), np.ones((4, 2)))

    def test_unknown_variant(self):
        with pytest.raises(ArgumentError):
            cost_matrix(np.ones((2, 3)), np.ones((4, 3)), "cosine")


class TestTransportProblem:
    def test_rejects_nonpositive_marginals(self):
        with pytest.raises(ArgumentError):
            TransportProblem(np.ones((2, 2)), np.array([1.0, 0.0]), np.full(2, 0.5), 0.1)

    def test_rejects_unnormalized_marginals(self):
        with pytest.raises(ArgumentError):
            TransportProblem(np.ones((2, 2)), np.full(2, 0.6), np.full(2, 0.5), 0.1)

    def test_rejects_bad_epsilon(self):
        with pytest.raises(ArgumentError):
            uniform_problem(np.ones((2, 2)), 0.0)


class TestSinkhorn:
    def test_single_cell_mass_conservation(self):
        plan = sinkhorn(uniform_problem(np.array([[0.37]]), 0.1))
        assert abs(plan.plan[0, 0] - 1.0) < 1e-12
        assert plan.converged

    def test_uniform_cost_gives_uniform_plan(self):
        plan = sinkhorn(uniform_problem(np.full((2, 2), 0.8), 0.1))
        assert np.abs(plan.plan - 0.25).max() < 1e-12

    def test_matches_scalar_reference_on_permutation_cost(self):
        cost = np.array([[0.0, 1.0], [1.0, 0.0]])
        plan = sinkhorn(uniform_problem(cost, 0.05), max_iter=5000, tol=1e-12)
        oracle = reference_sinkhorn(cost, [0.5, 0.5], [0.5, 0.5], 0.05, 2000)
        assert np.abs(plan.plan - oracle).max() < 1e-8
        assert plan.plan[0, 1] < 1e-6 and plan.plan[1, 0] < 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_marginal_feasibility_and_nonnegativity(self, seed):
        rng = Rng(seed)
        nr = int(rng.integers(2, 7))
        nc = int(rng.integers(2, 12))
        cost = cost_matrix(rng.normal((nr, 5)), rng.normal((nc, 5)), "dot")
        problem = uniform_problem(cost, 0.05)
        plan = sinkhorn(problem, max_iter=20000, tol=1e-8)
        assert plan.converged
        assert plan.plan.min() >= 0.0
        assert np.abs(plan.plan.sum(axis=1) - problem.mu).max() < 1e-8
        assert np.abs(plan.plan.sum(axis=0) - problem.nu).max() < 1e-8

    def test_cost_shift_invariance(self):
        rng = Rng(11)
        cost = rng.uniform((3, 5), 0.0, 2.0)
        base = sinkhorn(uniform_problem(cost, 0.1), max_iter=20000, tol=1e-10)
        shifted = sinkhorn(uniform_problem(cost + 0.7, 0.1), max_iter=20000, tol=1e-10)
        assert np.abs(base.plan - shifted.plan).max() < 1e-8

    def test_entropy_nondecreasing_in_epsilon(self):
        rng = Rng(13)
        cost = rng.uniform((4, 6), 0.0, 2.0)
        entropies = []
        for eps in (0.01, 0.05, 0.2, 0.5, 1.0):
            plan = sinkhorn(uniform_problem(cost, eps), max_iter=300000, tol=1e-7)
            assert plan.converged
            entropies.append(plan_entropy(plan.plan))
        assert all(b >= a - 1e-9 for a, b in zip(entropies, entropies[1:]))

    def test_large_epsilon_approaches_outer_product(self):
        rng = Rng(17)
        cost = rng.uniform((3, 4), 0.0, 2.0)
        problem = uniform_problem(cost, 1000.0)
        plan = sinkhorn(problem, max_iter=1000, tol=1e-10)
        outer = np.outer(problem.mu, problem.nu)
        assert np.abs(plan.plan - outer).max() < 1e-4

    def test_not_converged_flag(self):
        # asymmetric problem: one scaling pass cannot satisfy both marginals
        cost = Rng(11).uniform((3, 5), 0.0, 2.0)
        plan = sinkhorn(uniform_problem(cost, 0.05), max_iter=1, tol=1e-12)
        assert not plan.converged
        assert plan.iterations == 1

    def test_epsilon_underflow_raises(self):
        with pytest.raises(NumericError):
            sinkhorn(uniform_problem(np.array([[0.0, 1.0], [1.0, 0.0]]), 5e-324))

    def test_argument_validation(self):
        problem = uniform_problem(np.ones((2, 2)), 0.1)
        with pytest.raises(ArgumentError):
            sinkhorn(problem, max_iter=0)
        with pytest.raises(ArgumentError):
            sinkhorn(problem, tol=0.0)
