#!/usr/bin/env python3
"""
Tests for the tabular MDP core: exact DP, occupancy measures, NPG updates and the
performance-difference / simulation identities
"""

import numpy as np
import pytest

from exceptions import DimensionMismatchError, InvalidDistributionError, InvalidModelError, InvalidParameterError
from mdp_core import (
    TabularMDP,
    TimePolicy,
    enumerate_deterministic_policies,
    evaluate_policy,
    l1_model_distance,
    load_mdp,
    npg_step,
    occupancy,
    performance_difference,
    plan_optimal,
    policy_value,
    rollout_statistics,
    save_mdp,
    simulation_gap_bound,
)
from model_zoo import make_random_mdp, make_random_transition


def two_state_mdp(horizon: int = 2) -> TabularMDP:
    """Action 1 always moves to state 1, which pays 1 under either action."""
    transition = np.zeros((2, 2, 2))
    transition[:, 0, 0] = 1.0
    transition[:, 1, 1] = 1.0
    reward = np.array([[0.0, 0.0], [1.0, 1.0]])
    return TabularMDP(transition, reward, np.array([1.0, 0.0]), horizon)


class TestTabularMDP:
    def test_rejects_row_that_does_not_sum_to_one(self):
        mdp = make_random_mdp(0, 3, 2, 2)
        transition = np.array(mdp.transition)
        transition[1, 0, 0] += 0.1
        with pytest.raises(InvalidModelError) as info:
            TabularMDP(transition, mdp.reward, mdp.initial_dist, 2)
        assert info.value.coordinates == (1, 0)

    def test_rejects_negative_probability(self):
        transition = np.array([[[1.5, -0.5]], [[0.0, 1.0]]])
        with pytest.raises(InvalidModelError) as info:
            TabularMDP(transition, np.zeros((2, 1)), np.array([1.0, 0.0]), 1)
        assert info.value.coordinates == (0, 0, 1)

    def test_rejects_reward_outside_unit_interval(self):
        mdp = make_random_mdp(0, 2, 2, 2)
        reward = np.array(mdp.reward)
        reward[0, 1] = 1.5
        with pytest.raises(InvalidModelError):
            TabularMDP(mdp.transition, reward, mdp.initial_dist, 2)

    def test_rejects_mismatched_initial_distribution(self):
        mdp = make_random_mdp(0, 3, 2, 2)
        with pytest.raises(DimensionMismatchError):
            TabularMDP(mdp.transition, mdp.reward, np.array([0.5, 0.5]), 2)

    def test_rejects_zero_horizon(self):
        mdp = make_random_mdp(0, 3, 2, 2)
        with pytest.raises(InvalidParameterError):
            TabularMDP(mdp.transition, mdp.reward, mdp.initial_dist, 0)

    def test_tables_are_read_only(self):
        mdp = make_random_mdp(0, 3, 2, 2)
        with pytest.raises(ValueError):
            mdp.transition[0, 0, 0] = 1.0

    def test_save_and_load(self, tmp_path):
        mdp = make_random_mdp(3, 3, 2, 4)
        path = tmp_path / "mdp.json"
        save_mdp(path, mdp)
        loaded = load_mdp(path)
        np.testing.assert_array_equal(loaded.transition, mdp.transition)
        np.testing.assert_array_equal(loaded.reward, mdp.reward)
        assert loaded.horizon == 4


class TestEvaluation:
    def test_two_state_values_by_hand(self):
        mdp = two_state_mdp(horizon=2)
        stay = TimePolicy.deterministic(np.zeros((2, 2), dtype=int), 2)
        move = TimePolicy.deterministic(np.ones((2, 2), dtype=int), 2)
        assert policy_value(mdp, stay) == pytest.approx(0.0)
        assert policy_value(mdp, move) == pytest.approx(1.0)
        _, optimal = plan_optimal(mdp)
        assert optimal == pytest.approx(1.0)

    def test_horizon_one_value_is_expected_reward(self):
        mdp = make_random_mdp(1, 4, 3, 1)
        policy = TimePolicy.uniform(1, 4, 3)
        expected = float(mdp.initial_dist @ mdp.reward.mean(axis=1))
        assert policy_value(mdp, policy) == pytest.approx(expected, abs=1e-12)

    def test_value_equals_occupancy_weighted_reward(self):
        rng = np.random.default_rng(0)
        mdp = make_random_mdp(2, 5, 3, 6)
        for _ in range(10):
            policy = TimePolicy.random(rng, 6, 5, 3)
            d = occupancy(mdp, policy).per_step
            assert policy_value(mdp, policy) == pytest.approx(float((d * mdp.reward).sum()), abs=1e-10)

    def test_occupancy_steps_are_distributions(self):
        rng = np.random.default_rng(1)
        mdp = make_random_mdp(3, 4, 2, 5)
        d = occupancy(mdp, TimePolicy.random(rng, 5, 4, 2))
        np.testing.assert_allclose(d.per_step.sum(axis=(1, 2)), 1.0, atol=1e-12)
        assert d.average.sum() == pytest.approx(1.0)

    def test_values_stay_in_range(self):
        rng = np.random.default_rng(2)
        mdp = make_random_mdp(4, 4, 3, 5)
        triple = evaluate_policy(mdp, TimePolicy.random(rng, 5, 4, 3))
        for h in range(5):
            assert triple.values[h].min() >= -1e-12
            assert triple.values[h].max() <= 5 - h + 1e-12

    def test_policy_shape_mismatch(self):
        mdp = make_random_mdp(0, 3, 2, 2)
        with pytest.raises(DimensionMismatchError):
            evaluate_policy(mdp, TimePolicy.uniform(3, 3, 2))

    def test_optimal_plan_dominates_every_deterministic_policy(self):
        mdp = make_random_mdp(5, 2, 2, 3)
        _, optimal = plan_optimal(mdp)
        best = max(policy_value(mdp, p) for p in enumerate_deterministic_policies(3, 2, 2))
        assert optimal == pytest.approx(best, abs=1e-12)

    def test_enumeration_count(self):
        assert sum(1 for _ in enumerate_deterministic_policies(2, 2, 3)) == 3 ** 4

    def test_rollouts_agree_with_dp(self):
        mdp = make_random_mdp(6, 4, 3, 4)
        policy = TimePolicy.random(np.random.default_rng(6), 4, 4, 3)
        mean, stderr, frequencies = rollout_statistics(mdp, policy, 20000, seed=6)
        assert abs(mean - policy_value(mdp, policy)) <= 4 * stderr
        np.testing.assert_allclose(frequencies, occupancy(mdp, policy).average, atol=0.02)


class TestIdentities:
    def test_performance_difference_identity(self):
        rng = np.random.default_rng(0)
        mdp = make_random_mdp(0, 4, 3, 5)
        for _ in range(100):
            model = mdp.with_transition(make_random_transition(rng, 4, 3))
            lhs, rhs = performance_difference(model, TimePolicy.random(rng, 5, 4, 3), TimePolicy.random(rng, 5, 4, 3))
            assert lhs == pytest.approx(rhs, abs=1e-9)

    def test_simulation_lemma(self):
        rng = np.random.default_rng(1)
        mdp = make_random_mdp(1, 4, 2, 4)
        for _ in range(200):
            alt = mdp.with_transition(make_random_transition(rng, 4, 2))
            gap, bound = simulation_gap_bound(mdp, alt, TimePolicy.random(rng, 4, 4, 2))
            assert gap <= bound + 1e-12

    def test_simulation_lemma_needs_shared_reward(self):
        mdp = make_random_mdp(1, 3, 2, 2)
        other = make_random_mdp(2, 3, 2, 2)
        with pytest.raises(InvalidModelError):
            simulation_gap_bound(mdp, other, TimePolicy.uniform(2, 3, 2))

    def test_l1_distance(self):
        assert l1_model_distance(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(2.0)
        with pytest.raises(InvalidDistributionError):
            l1_model_distance(np.array([0.7, 0.7]), np.array([0.5, 0.5]))


class TestNpgStep:
    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        policy = TimePolicy.random(rng, 3, 4, 3)
        advantage = rng.normal(size=(3, 4, 3))
        shift = rng.normal(size=(3, 4, 1))
        np.testing.assert_allclose(npg_step(policy, advantage, 0.1).action_probs,
                                   npg_step(policy, advantage + shift, 0.1).action_probs, atol=1e-12)

    def test_zero_step_is_identity(self):
        policy = TimePolicy.random(np.random.default_rng(1), 2, 3, 2)
        assert npg_step(policy, np.ones((2, 3, 2)), 0.0) is policy

    def test_rows_stay_on_simplex(self):
        rng = np.random.default_rng(2)
        policy = TimePolicy.random(rng, 2, 3, 4)
        updated = npg_step(policy, 50 * rng.normal(size=(2, 3, 4)), 0.2)
        np.testing.assert_allclose(updated.action_probs.sum(axis=2), 1.0, atol=1e-12)
        assert updated.action_probs.min() >= 0

    def test_mass_moves_toward_positive_advantage(self):
        policy = TimePolicy.uniform(1, 1, 2)
        updated = npg_step(policy, np.array([[[1.0, -1.0]]]), 0.5)
        assert updated.action_probs[0, 0, 0] > 0.5

    def test_shared_mode_applies_one_update_everywhere(self):
        rng = np.random.default_rng(3)
        policy = TimePolicy.uniform(3, 2, 2)
        updated = npg_step(policy, rng.normal(size=(3, 2, 2)), 0.1, mode="shared")
        np.testing.assert_allclose(updated.action_probs[0], updated.action_probs[2])

    def test_rejects_unknown_mode(self):
        policy = TimePolicy.uniform(1, 1, 2)
        with pytest.raises(InvalidParameterError):
            npg_step(policy, np.zeros((1, 1, 2)), 0.1, mode="global")

    def test_kl_to_itself_is_zero(self):
        policy = TimePolicy.random(np.random.default_rng(4), 2, 3, 2)
        assert policy.kl_divergence(policy, np.ones((2, 3))) == pytest.approx(0.0, abs=1e-15)


if __name__ == "__main__":
    pytest.main([__file__])
