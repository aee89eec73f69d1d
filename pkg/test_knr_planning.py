#!/usr/bin/env python3
"""
Tests for KNR planning: rollout evaluation, pessimistic candidate selection and posterior weights
"""

import numpy as np
import pytest

from estimation import ThresholdPolicy
from exceptions import EmptyDatasetError, InvalidParameterError
from knr_planning import (
    RolloutEvaluator,
    knr_ball_feasibility,
    knr_coverage,
    knr_cppo,
    knr_posterior,
    knr_pspo,
    sample_scenario_dataset,
)
from model_zoo import make_knr_scenario


@pytest.fixture
def scenario():
    return make_knr_scenario(0, horizon=3, num_policies=4)


class TestRolloutEvaluator:
    def test_common_random_numbers(self, scenario):
        evaluator = RolloutEvaluator(scenario, 50, seed=0)
        policy = scenario.candidate_policies[0]
        assert evaluator.value(policy, scenario.model.W) == evaluator.value(policy, scenario.model.W)

    def test_values_stay_in_range(self, scenario):
        evaluator = RolloutEvaluator(scenario, 50, seed=1)
        table = evaluator.value_table(list(scenario.candidate_policies), [scenario.model.W, 2 * scenario.model.W])
        assert table.shape == (4, 2)
        assert table.min() >= 0
        assert table.max() <= scenario.horizon

    def test_feature_moment_is_a_second_moment(self, scenario):
        evaluator = RolloutEvaluator(scenario, 50, seed=2)
        moment = evaluator.feature_moment(scenario.candidate_policies[0], scenario.model.W)
        np.testing.assert_allclose(moment, moment.T)
        assert np.linalg.eigvalsh(moment).min() >= -1e-12
        assert np.trace(moment) <= 1 + 1e-9


class TestKnrCoverage:
    def test_full_rank_data_gives_finite_bound(self, scenario):
        dataset = sample_scenario_dataset(scenario, 300, seed=7)
        coverage = knr_coverage(scenario, dataset, 0, 0.1, num_rollouts=50, seed=7)
        assert coverage.rank_sigma_rho == scenario.model.feature.dim
        assert 0 < coverage.rel_cond_number < np.inf
        assert 0 < coverage.bound < np.inf

    def test_empty_dataset(self, scenario):
        with pytest.raises(EmptyDatasetError):
            knr_coverage(scenario, sample_scenario_dataset(scenario, 0, seed=8), 0, 0.1)


class TestKnrCppo:
    def test_picks_best_pessimistic_candidate(self, scenario):
        dataset = sample_scenario_dataset(scenario, 300, seed=2)
        result = knr_cppo(scenario, dataset, ThresholdPolicy(rule="knr"), num_boundary=8, num_rollouts=50, seed=2)
        assert result.values.shape == (4, 9)
        assert result.pessimistic_value == pytest.approx(result.values.min(axis=1).max())
        assert result.policy_index == int(np.argmax(result.values.min(axis=1)))
        assert len(result.diagnostics["true_values"]) == 4

    def test_same_seed_same_choice(self, scenario):
        dataset = sample_scenario_dataset(scenario, 100, seed=3)
        first = knr_cppo(scenario, dataset, ThresholdPolicy(rule="knr"), 4, 30, seed=3)
        second = knr_cppo(scenario, dataset, ThresholdPolicy(rule="knr"), 4, 30, seed=3)
        np.testing.assert_array_equal(first.values, second.values)


class TestKnrPspo:
    def test_mixture_weights_stay_on_simplex(self, scenario):
        dataset = sample_scenario_dataset(scenario, 200, seed=4)
        posterior = knr_posterior(scenario, dataset, 1.0)
        result = knr_pspo(scenario, posterior, 10, 0.1, num_rollouts=30, seed=4)
        assert len(result.weights) == 11
        for weights in result.weights:
            assert weights.sum() == pytest.approx(1.0)
            assert weights.min() >= 0
        assert len(result.values_under_truth) == 11

    def test_eta_bound(self, scenario):
        posterior = knr_posterior(scenario, sample_scenario_dataset(scenario, 20, seed=5), 1.0)
        with pytest.raises(InvalidParameterError):
            knr_pspo(scenario, posterior, 5, 1 / 6)


class TestBallFeasibility:
    def test_truth_usually_inside(self, scenario):
        inside = knr_ball_feasibility(scenario, 200, 20, ThresholdPolicy(rule="knr"), seed=6)
        assert inside.shape == (20,)
        assert inside.mean() >= 0.9


if __name__ == "__main__":
    pytest.main([__file__])
