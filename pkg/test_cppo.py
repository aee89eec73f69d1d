#!/usr/bin/env python3
"""
Tests for pessimistic evaluation, the max-min optimizer and the naive baseline
"""

import numpy as np
import pytest

from cppo import (
    CppoOptimizer,
    brute_force_maxmin,
    cppo_optimize,
    cppo_pipeline,
    naive_certainty_equivalent,
    pessimism_decomposition,
    pessimistic_value,
)
from estimation import ThresholdPolicy, build_version_space, mle_finite
from exceptions import EmptyVersionSpaceError, InvalidParameterError
from mdp_core import TimePolicy, plan_optimal, policy_value
from model_zoo import (
    make_partial_coverage_instance,
    make_random_mdp,
    make_random_transition,
    make_reference_scenario,
    make_trap_class,
)
from offline_data import sample_dataset, uniform_offline


def tiny_version_space(seed: int, size: int = 3):
    """Two states, two actions, horizon two: 16 deterministic policies"""
    rng = np.random.default_rng(seed)
    mdp = make_random_mdp(seed, 2, 2, 2)
    models = np.stack([mdp.transition] + [make_random_transition(rng, 2, 2) for _ in range(size - 1)])
    return mdp, models


class TestPessimisticValue:
    def test_is_minimum_over_members(self):
        mdp, models = tiny_version_space(0, size=4)
        policy = TimePolicy.uniform(2, 2, 2)
        value, worst = pessimistic_value(models, mdp, policy)
        values = [policy_value(mdp.with_transition(m), policy) for m in models]
        assert value == pytest.approx(min(values))
        assert worst == int(np.argmin(values))

    def test_single_member_is_plain_evaluation(self):
        mdp = make_random_mdp(1, 3, 2, 3)
        policy = TimePolicy.uniform(3, 3, 2)
        value, _ = pessimistic_value(mdp.transition, mdp, policy)
        assert value == pytest.approx(policy_value(mdp, policy))

    def test_empty_version_space(self):
        mdp = make_random_mdp(1, 2, 2, 2)
        with pytest.raises(EmptyVersionSpaceError):
            pessimistic_value(np.zeros((0, 2, 2, 2)), mdp, TimePolicy.uniform(2, 2, 2))


class TestOptimizer:
    def test_rejects_eta_at_bound(self):
        mdp = make_random_mdp(0, 2, 2, 3)
        with pytest.raises(InvalidParameterError):
            CppoOptimizer(mdp, 10, 1 / 6)
        with pytest.raises(InvalidParameterError):
            CppoOptimizer(mdp, 10, 0.0)

    def test_rejects_zero_iterations(self):
        mdp = make_random_mdp(0, 2, 2, 3)
        with pytest.raises(InvalidParameterError):
            CppoOptimizer(mdp, 0, 0.1)

    @pytest.mark.parametrize("seed", range(40))
    def test_matches_brute_force_on_tiny_instances(self, seed):
        mdp, models = tiny_version_space(seed, size=4)
        _, exact = brute_force_maxmin(models, mdp)
        result = cppo_optimize(models, mdp, 100, 0.2)
        assert result.pessimistic_value >= exact - 1e-9

    @pytest.mark.parametrize("seed", range(10))
    def test_polish_never_lowers_best_iterate(self, seed):
        mdp, models = tiny_version_space(seed, size=4)
        raw = cppo_optimize(models, mdp, 100, 0.2, polish=False)
        polished = cppo_optimize(models, mdp, 100, 0.2)
        assert polished.pessimistic_value >= raw.pessimistic_value
        assert polished.trajectory == raw.trajectory

    def test_single_member_finds_optimal_policy(self):
        mdp = make_random_mdp(2, 4, 3, 4)
        result = cppo_optimize(mdp.transition, mdp, 30, 0.1)
        _, optimal = plan_optimal(mdp)
        assert result.pessimistic_value == pytest.approx(optimal, abs=1e-9)

    def test_trajectory_covers_every_iterate(self):
        mdp, models = tiny_version_space(3)
        result = cppo_optimize(models, mdp, 7, 0.2, polish=False)
        assert [row["iteration"] for row in result.trajectory_rows()] == list(range(8))
        assert result.pessimistic_value == pytest.approx(max(v for _, v, _ in result.trajectory))

    def test_shared_mode_runs(self):
        mdp, models = tiny_version_space(4)
        result = cppo_optimize(models, mdp, 10, 0.2, mode="shared")
        np.testing.assert_allclose(result.policy.action_probs.sum(axis=2), 1.0)


class TestPipeline:
    def test_pessimism_underestimates_learned_policy(self):
        mdp, model_class = make_reference_scenario(0, 4, 2, 3, 10, 0.5)
        dataset = sample_dataset(mdp, uniform_offline(4, 2), 400, seed=0)
        result = cppo_pipeline(model_class, dataset, ThresholdPolicy(), mdp, 20, 0.1)
        assert result.diagnostics["truth_in_space"]
        assert result.pessimistic_value <= policy_value(mdp, result.policy) + 1e-12

    def test_decomposition_holds_when_truth_is_captured(self):
        mdp, model_class = make_reference_scenario(1, 4, 2, 3, 10, 0.5)
        dataset = sample_dataset(mdp, uniform_offline(4, 2), 400, seed=1)
        mle = mle_finite(model_class, dataset)
        space = build_version_space(model_class, mle, dataset, ThresholdPolicy())
        result = cppo_optimize(space, mdp, 20, 0.1)
        comparator, _ = plan_optimal(mdp)
        decomposition = pessimism_decomposition(result, comparator, mdp, space)
        assert space.contains_truth
        assert decomposition.pessimism_term <= 1e-12
        assert decomposition.holds
        total = decomposition.estimation_term + decomposition.optimization_term + decomposition.pessimism_term
        assert total == pytest.approx(decomposition.gap, abs=1e-12)

    def test_trap_separates_cppo_from_naive(self):
        mdp, rho, comparator = make_partial_coverage_instance(0, 5, 2, 5)
        model_class = make_trap_class(1, mdp, rho, 20, 0.5, agreeing_fraction=1.0)
        dataset = sample_dataset(mdp, rho, 500, seed=2)
        target = policy_value(mdp, comparator)
        result = cppo_pipeline(model_class, dataset, ThresholdPolicy(), mdp, 20, 0.09)
        naive = naive_certainty_equivalent(model_class, dataset, mdp)
        cppo_gap = target - policy_value(mdp, result.policy)
        naive_gap = target - policy_value(mdp, naive)
        assert cppo_gap <= naive_gap + 1e-12
        if mle_finite(model_class, dataset) != model_class.truth_index:
            assert naive_gap > 0.5


if __name__ == "__main__":
    pytest.main([__file__])
