import numpy as np
import pytest

from xagent.errors import ArgumentError, ShapeError
from xagent.numerics import Rng, l2_normalize_rows, sigmoid
from xagent.selection import (
    AffinityMatrix,
    affinity,
    select_agents_baseline,
    select_channels,
    select_tokens,
)
from xagent.transport import TransportPlan, cost_matrix, sinkhorn, uniform_problem


def make_plan(values):
    values = np.asarray(values, dtype=np.float64)
    return TransportPlan(plan=values, iterations=0, marginal_error=0.0, converged=True)


def solved_plan(f_t, key, eps=0.05):
    cost = cost_matrix(f_t, key, "dot")
    return sinkhorn(uniform_problem(cost, eps), max_iter=20000, tol=1e-8)


class TestAffinity:
    def test_orthogonal_sets_give_half(self):
        f_t = np.array([[1.0, 0.0, 0.0]])
        key = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        aff = affinity(f_t, key, make_plan(np.ones((1, 2))))
        assert np.abs(aff.values - 0.5).max() < 1e-15

    def test_zero_plan_entry_gives_half(self):
        rng = Rng(0)
        f_t, key = rng.normal((2, 3)), rng.normal((4, 3))
        plan = make_plan(np.zeros((2, 4)))
        aff = affinity(f_t, key, plan)
        assert np.abs(aff.values - 0.5).max() < 1e-15

    def test_matches_elementwise_oracle(self):
        rng = Rng(1)
        f_t, key = rng.normal((3, 5)), rng.normal((6, 5))
        plan = solved_plan(f_t, key)
        aff = affinity(f_t, key, plan)
        for i in range(3):
            for j in range(6):
                cos = float(f_t[i] @ key[j]) / (
                    np.linalg.norm(f_t[i]) * np.linalg.norm(key[j])
                )
                want = 1.0 / (1.0 + np.exp(-plan.plan[i, j] * cos))
                assert abs(aff.values[i, j] - want) < 1e-12

    def test_open_interval(self):
        rng = Rng(2)
        f_t, key = rng.normal((4, 5)), rng.normal((7, 5))
        aff = affinity(f_t, key, solved_plan(f_t, key))
        assert aff.values.min() > 0.0 and aff.values.max() < 1.0

    def test_monotone_in_product(self):
        base = np.linspace(-2.0, 2.0, 9)
        out = sigmoid(base)
        assert np.all(np.diff(out) > 0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            affinity(np.ones((2, 3)), np.ones((4, 3)), make_plan(np.ones((2, 5))))


class TestSelectChannels:
    def test_ranking_by_row_mean(self):
        a = AffinityMatrix(values=np.array([[0.2, 0.2], [0.5, 0.5], [0.3, 0.3]]))
        idx, block = select_channels(a, 2)
        assert idx.tolist() == [1, 2]
        assert np.array_equal(block, a.values[[1, 2]])

    def test_all_channels_sorted(self):
        a = AffinityMatrix(values=np.array([[0.2, 0.2], [0.5, 0.5], [0.3, 0.3]]))
        idx, _ = select_channels(a, 3)
        assert idx.tolist() == [1, 2, 0]

    def test_k_out_of_range(self):
        a = AffinityMatrix(values=np.ones((3, 4)) * 0.5)
        with pytest.raises(ArgumentError):
            select_channels(a, 4)

    @pytest.mark.parametrize("seed", range(5))
    def test_prefix_property(self, seed):
        values = sigmoid(Rng(seed).normal((6, 8)))
        a = AffinityMatrix(values=values)
        idx_small, _ = select_channels(a, 3)
        idx_big, _ = select_channels(a, 4)
        assert idx_big[:3].tolist() == idx_small.tolist()

    @pytest.mark.parametrize("seed", range(5))
    def test_row_permutation_equivariance(self, seed):
        rng = Rng(seed)
        values = sigmoid(rng.normal((5, 7)))
        perm = rng.permutation(5)
        idx, _ = select_channels(AffinityMatrix(values=values), 3)
        idx_p, _ = select_channels(AffinityMatrix(values=values[perm]), 3)
        relabeled = np.argsort(perm)[idx]
        assert idx_p.tolist() == relabeled.tolist()


class TestSelectTokens:
    def test_single_channel_never_deduplicates(self):
        rng = Rng(3)
        sel = select_tokens(sigmoid(rng.normal((1, 6))), rng.normal((6, 4)), 3, np.zeros(4))
        assert not sel.dedup_mask.any()
        assert sel.agents.shape == (3, 4)

    def test_identical_rows_fully_masked(self):
        rng = Rng(4)
        row = sigmoid(rng.normal((1, 6)))
        a_star = np.vstack([row, row])
        value = rng.normal((6, 4))
        mask_token = np.full(4, 7.5)
        sel = select_tokens(a_star, value, 2, mask_token)
        assert sel.dedup_mask.tolist() == [False, False, True, True]
        assert np.array_equal(sel.agents[2], mask_token)
        assert np.array_equal(sel.agents[3], mask_token)

    def test_ascending_order_matches_sort_oracle(self):
        rng = Rng(5)
        a_star = sigmoid(rng.normal((3, 10)))
        sel = select_tokens(a_star, rng.normal((10, 2)), 4, np.zeros(2), largest=False)
        for c in range(3):
            oracle = sorted(range(10), key=lambda j: (a_star[c, j], j))[:4]
            assert sel.token_idx[c].tolist() == oracle

    def test_descending_flag(self):
        rng = Rng(6)
        a_star = sigmoid(rng.normal((2, 8)))
        sel = select_tokens(a_star, rng.normal((8, 3)), 3, np.zeros(3), largest=True)
        for c in range(2):
            oracle = sorted(range(8), key=lambda j: (-a_star[c, j], j))[:3]
            assert sel.token_idx[c].tolist() == oracle

    @pytest.mark.parametrize("seed", range(10))
    def test_dedup_matches_set_oracle(self, seed):
        rng = Rng(seed)
        a_star = sigmoid(rng.normal((3, 9)))
        value = rng.normal((9, 5))
        mask_token = rng.normal((5,))
        sel = select_tokens(a_star, value, 3, mask_token)
        seen = set()
        for r, t in enumerate(sel.flat_token_idx()):
            t = int(t)
            if t in seen:
                assert sel.dedup_mask[r]
                assert np.array_equal(sel.agents[r], mask_token)
            else:
                assert not sel.dedup_mask[r]
                assert np.array_equal(sel.agents[r], value[t])
                seen.add(t)
        alive = sel.flat_token_idx()[~sel.dedup_mask]
        assert len(set(alive.tolist())) == alive.size

    def test_q_out_of_range(self):
        with pytest.raises(ArgumentError):
            select_tokens(np.full((2, 3), 0.5), np.ones((3, 2)), 4, np.zeros(2))


class TestBaselineStrategies:
    def setup_method(self):
        rng = Rng(7)
        self.f_t = rng.normal((5, 6))
        self.key = rng.normal((12, 6))
        self.value = rng.normal((12, 6))
        self.plan = solved_plan(self.f_t, self.key)

    def common(self, strategy, **kw):
        return select_agents_baseline(
            strategy,
            value=self.value,
            k=3,
            q=2,
            mask_token=np.zeros(6),
            f_t=self.f_t,
            key=self.key,
            plan=self.plan,
            rng=Rng(42),
            **kw,
        )

    @pytest.mark.parametrize(
        "strategy", ["combined", "cosine-only", "ot-only", "random", "learnable-init"]
    )
    def test_row_count_contract(self, strategy):
        sel = self.common(strategy)
        assert sel.agents.shape == (6, 6)

    def test_random_is_reproducible(self):
        a = self.common("random")
        b = self.common("random")
        assert np.array_equal(a.agents, b.agents)
        assert a.flat_token_idx().tolist() == b.flat_token_idx().tolist()
        assert len(set(a.flat_token_idx().tolist())) == 6

    def test_learnable_passthrough(self):
        rows = Rng(8).normal((6, 6))
        sel = self.common("learnable-init", learned_agents=rows)
        assert np.array_equal(sel.agents, rows)

    def test_cosine_only_equals_combined_under_unit_plan(self):
        unit = make_plan(np.ones((5, 12)))
        combined = select_agents_baseline(
            "combined", value=self.value, k=3, q=2, mask_token=np.zeros(6),
            f_t=self.f_t, key=self.key, plan=unit,
        )
        cosine = self.common("cosine-only")
        assert np.array_equal(combined.agents, cosine.agents)
        assert combined.channel_idx.tolist() == cosine.channel_idx.tolist()

    def test_unknown_strategy(self):
        with pytest.raises(ArgumentError):
            self.common("argmax")

    def test_combined_matches_two_stage_path(self):
        sel = self.common("combined")
        aff = affinity(self.f_t, self.key, self.plan)
        chan, a_star = select_channels(aff, 3)
        manual = select_tokens(a_star, self.value, 2, np.zeros(6))
        assert sel.channel_idx.tolist() == chan.tolist()
        assert np.array_equal(sel.agents, manual.agents)
