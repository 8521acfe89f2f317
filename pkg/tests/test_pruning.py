import math

import numpy as np
import pytest

from latecut.distill import build_cache
from latecut.errors import ConfigError, DegenerateBlockError, InvalidBlockError
from latecut.network import op_counter, random_network, zero_block
from latecut.profiling import profile
from latecut.pruning import (
    BlockProfile,
    baseline_curl,
    baseline_finetune_oracle,
    baseline_l2_ratio,
    baseline_random,
    capacity_gap,
    importance,
    initial_noise,
    kl_divergence,
    rank_and_prune,
    softmax,
)

from oracles import naive_prune_ranking


def toy_batch(net, size=16, seed=0):
    return np.random.default_rng(seed).standard_normal((size, net.input_dim))


class TestInitialNoise:
    def test_zero_branch_block_has_zero_noise(self):
        net = random_network(4, 4, 3, 2, seed=0)
        zero_block(net, 2)
        assert initial_noise(net, toy_batch(net), 2) == 0.0

    def test_dead_relu_block_has_zero_noise(self):
        net = random_network(4, 4, 2, 2, seed=1)
        net.blocks[1].bias1[:] = -100.0  # relu never fires on a standard-normal batch
        net.blocks[1].bias2[:] = 0.0
        assert initial_noise(net, toy_batch(net, seed=1), 2) == 0.0

    def test_hand_computed_single_block(self):
        # identity stem, one block; with the block skipped the features are
        # the raw input, so epsilon is the MSE between branch-out and input
        from test_network import hand_net

        net = hand_net()
        x = np.array([[1.0, -1.0]])
        # full path (hand arithmetic): [3.75, -3.25]; skipped path: [1, -1]
        expected = ((3.75 - 1.0) ** 2 + (-3.25 - -1.0) ** 2) / 2.0
        assert initial_noise(net, x, 1) == expected == 6.3125

    def test_permutation_invariant(self):
        net = random_network(5, 4, 2, 2, seed=2)
        batch = toy_batch(net, size=12, seed=2)
        shuffled = batch[np.random.default_rng(3).permutation(12)]
        assert initial_noise(net, batch, 1) == pytest.approx(
            initial_noise(net, shuffled, 1), abs=1e-12
        )

    def test_invalid_block(self):
        net = random_network(4, 4, 2, 2, seed=0)
        with pytest.raises(InvalidBlockError):
            initial_noise(net, toy_batch(net), 5)


class TestCapacityGap:
    def test_identical_blocks_have_equal_gaps(self):
        net = random_network(4, 4, 3, 2, seed=0)
        gaps = [capacity_gap(net, j) for j in (1, 2, 3)]
        assert gaps[0] == gaps[1] == gaps[2]

    def test_width4_block_in_400_param_net(self):
        # stem 24*4+4=100, 7 blocks * 40, classifier 4*4+4=20 -> 400 total
        net = random_network(24, 4, 7, 4, seed=0)
        from latecut.network import parameter_count

        assert parameter_count(net) == 400
        assert capacity_gap(net, 1) == 40 / 400 == 0.1

    def test_gaps_sum_below_one(self):
        net = random_network(6, 5, 4, 3, seed=1)
        assert sum(capacity_gap(net, j) for j in range(1, 5)) < 1.0


class TestImportance:
    def test_zero_epsilon_gives_zero(self):
        row = BlockProfile(1, epsilon_ini=0.0, capacity_gap=0.3, delta_t=0.2)
        assert importance(row) == 0.0

    def test_arithmetic(self):
        row = BlockProfile(1, epsilon_ini=0.2, capacity_gap=0.1, delta_t=0.25)
        assert importance(row) == pytest.approx(0.08, abs=1e-15)

    def test_zero_delta_t_is_degenerate(self):
        row = BlockProfile(1, epsilon_ini=0.2, capacity_gap=0.1, delta_t=0.0)
        with pytest.raises(DegenerateBlockError):
            importance(row)


class TestRankAndPrune:
    def test_zero_n_p_prunes_nothing(self):
        net = random_network(4, 4, 3, 2, seed=0)
        prof = profile(net, 8, mode="modeled")
        decision = rank_and_prune(net, toy_batch(net), prof, 0)
        assert decision.pruned == frozenset()
        assert len(decision.ranked) == 3

    def test_zero_branch_block_pruned_first(self):
        net = random_network(4, 4, 3, 2, seed=1)
        zero_block(net, 3)
        prof = profile(net, 8, mode="modeled")
        decision = rank_and_prune(net, toy_batch(net, seed=1), prof, 1)
        assert decision.pruned == frozenset({3})
        assert decision.ranked[0].block_id == 3
        assert decision.ranked[0].importance == 0.0

    def test_matches_naive_from_scratch_ranking(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            n_blocks = int(rng.integers(2, 7))
            net = random_network(5, 4, n_blocks, 3, seed=seed)
            for block in net.blocks:  # heterogeneous block strengths
                block.weight1 *= rng.uniform(0.2, 1.5)
                block.weight2 *= rng.uniform(0.2, 1.5)
            batch = rng.standard_normal((10, 5))
            prof = profile(net, 10, mode="modeled")
            decision = rank_and_prune(net, batch, prof, 1)
            naive = naive_prune_ranking(net, batch, prof.full_latency, prof.skipped_latency)
            assert [row.block_id for row in decision.ranked] == [row[1] for row in naive]
            for row, (naive_i, _, _, _, _) in zip(decision.ranked, naive):
                assert abs(row.importance - naive_i) < 1e-9

    def test_costs_exactly_n_plus_one_forward_passes(self):
        net = random_network(6, 5, 4, 3, seed=2)
        prof = profile(net, 8, mode="modeled")
        batch = toy_batch(net, seed=2)
        op_counter.reset()
        rank_and_prune(net, batch, prof, 2)
        assert op_counter.forward_passes == net.n_blocks + 1

    def test_latency_scaling_leaves_ordering_unchanged(self):
        import dataclasses

        net = random_network(5, 4, 4, 3, seed=3)
        batch = toy_batch(net, seed=3)
        prof = profile(net, 8, mode="modeled")
        base = rank_and_prune(net, batch, prof, 2)
        for scale in (1e-3, 7.0, 1e6):
            scaled = dataclasses.replace(
                prof,
                full_latency=prof.full_latency * scale,
                skipped_latency={j: t * scale for j, t in prof.skipped_latency.items()},
            )
            again = rank_and_prune(net, batch, scaled, 2)
            assert [r.block_id for r in again.ranked] == [r.block_id for r in base.ranked]
            assert again.pruned == base.pruned

    def test_n_p_out_of_range(self):
        net = random_network(4, 4, 3, 2, seed=0)
        prof = profile(net, 8, mode="modeled")
        with pytest.raises(ConfigError):
            rank_and_prune(net, toy_batch(net), prof, 4)
        with pytest.raises(ConfigError):
            rank_and_prune(net, toy_batch(net), prof, -1)


class TestBaselineRandom:
    def test_prune_all(self):
        net = random_network(4, 4, 3, 2, seed=0)
        decision = baseline_random(net, 3, seed=9)
        assert decision.pruned == frozenset({1, 2, 3})

    def test_same_seed_same_decision(self):
        net = random_network(4, 4, 5, 2, seed=0)
        first = baseline_random(net, 2, seed=42)
        second = baseline_random(net, 2, seed=42)
        assert first.pruned == second.pruned
        assert [r.block_id for r in first.ranked] == [r.block_id for r in second.ranked]

    def test_selection_is_uniform_chi_squared(self):
        net = random_network(4, 4, 4, 2, seed=0)
        counts = np.zeros(4)
        for seed in range(1000):
            (chosen,) = baseline_random(net, 1, seed=seed).pruned
            counts[chosen - 1] += 1
        expected = 250.0
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < 11.345  # chi-squared critical value, df=3, p=0.01


class TestBaselineL2Ratio:
    def test_zero_branch_ranked_first(self):
        net = random_network(4, 4, 3, 2, seed=4)
        zero_block(net, 2)
        decision = baseline_l2_ratio(net, toy_batch(net, seed=4), 1)
        assert decision.pruned == frozenset({2})
        assert decision.ranked[0].importance == 0.0

    def test_hand_computed_ratio(self):
        from test_network import hand_net

        net = hand_net()
        decision = baseline_l2_ratio(net, np.array([[1.0, -1.0]]), 1)
        # in = [1,-1]; out - in = branch = [2.75, -2.25]
        expected = math.sqrt(2.75 ** 2 + 2.25 ** 2) / math.sqrt(2.0)
        assert decision.ranked[0].importance == pytest.approx(expected, rel=1e-15)

    def test_scale_invariance_with_zero_biases(self):
        net = random_network(5, 4, 3, 2, seed=5)  # biases are zero by construction
        batch = toy_batch(net, seed=5)
        base = baseline_l2_ratio(net, batch, 1)
        exact = baseline_l2_ratio(net, 2.0 * batch, 1)  # power-of-two scale: bitwise
        assert [r.importance for r in exact.ranked] == [r.importance for r in base.ranked]
        close = baseline_l2_ratio(net, 3.0 * batch, 1)
        for a, b in zip(close.ranked, base.ranked):
            assert a.importance == pytest.approx(b.importance, rel=1e-12)

    def test_zero_input_features_error(self):
        from latecut.errors import NumericError

        net = random_network(4, 4, 1, 2, seed=0)
        net.stem_weight[:] = 0.0
        with pytest.raises(NumericError):
            baseline_l2_ratio(net, np.zeros((3, 4)), 1)


class TestBaselineCurl:
    def test_zero_branch_has_zero_kl(self):
        net = random_network(4, 4, 3, 2, seed=6)
        zero_block(net, 1)
        decision = baseline_curl(net, toy_batch(net, seed=6), 1)
        assert decision.pruned == frozenset({1})
        assert decision.ranked[0].importance == 0.0

    def test_kl_nonnegative_for_all_blocks(self):
        net = random_network(5, 4, 4, 3, seed=7)
        decision = baseline_curl(net, toy_batch(net, seed=7), 1)
        assert all(row.importance >= 0.0 for row in decision.ranked)

    def test_kl_hand_check_two_class_single_sample(self):
        p_logits = np.array([[0.0, 1.0]])
        q_logits = np.array([[1.0, 0.0]])
        p = np.exp([0.0, 1.0]) / np.exp([0.0, 1.0]).sum()
        q = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
        by_hand = p[0] * math.log(p[0] / q[0]) + p[1] * math.log(p[1] / q[1])
        assert kl_divergence(p_logits, q_logits) == pytest.approx(by_hand, rel=1e-12)

    def test_softmax_rows_sum_to_one(self):
        logits = np.random.default_rng(0).standard_normal((6, 4)) * 10
        np.testing.assert_allclose(softmax(logits).sum(axis=1), 1.0, atol=1e-12)


class TestFinetuneOracle:
    def _fixture(self, seed=8):
        net = random_network(5, 4, 3, 3, seed=seed)
        rng = np.random.default_rng(seed)
        batch = rng.standard_normal((12, 5))
        cache = build_cache(net, rng.standard_normal((20, 5)))
        return net, batch, cache

    def test_zero_branch_block_ranked_first_with_zero_loss(self):
        net, batch, _ = self._fixture()
        zero_block(net, 2)
        cache = build_cache(net, np.random.default_rng(1).standard_normal((20, 5)))
        decision = baseline_finetune_oracle(net, batch, cache, 1, k_steps=3)
        assert decision.pruned == frozenset({2})
        assert decision.ranked[0].tuned_loss == 0.0

    def test_oracle_costs_dominate_proxy_costs(self):
        net, batch, cache = self._fixture()
        prof = profile(net, 12, mode="modeled")
        k_steps = 5
        op_counter.reset()
        baseline_finetune_oracle(net, batch, cache, 1, k_steps, prof)
        assert op_counter.backward_passes >= net.n_blocks * k_steps
        oracle_forwards = op_counter.forward_passes
        op_counter.reset()
        rank_and_prune(net, batch, prof, 1)
        assert op_counter.forward_passes == net.n_blocks + 1 < oracle_forwards

    def test_deterministic_given_seed(self):
        net, batch, cache = self._fixture()
        first = baseline_finetune_oracle(net, batch, cache, 1, k_steps=4, seed=3)
        second = baseline_finetune_oracle(net, batch, cache, 1, k_steps=4, seed=3)
        assert first.pruned == second.pruned
        assert [r.importance for r in first.ranked] == [r.importance for r in second.ranked]

    def test_k_steps_validated(self):
        net, batch, cache = self._fixture()
        with pytest.raises(ConfigError):
            baseline_finetune_oracle(net, batch, cache, 1, k_steps=0)
