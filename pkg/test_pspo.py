#!/usr/bin/env python3
"""
Tests for conjugate beliefs, posterior updates and posterior-sampling policy optimization
"""

import numpy as np
import pytest

from estimation import ThresholdPolicy, build_version_space, loglog_slope, mle_finite, ridge_mle_knr
from exceptions import InconsistentClassError, InvalidModelError, InvalidParameterError
from mdp_core import plan_optimal
from model_zoo import FiniteModelClass, make_knr_scenario, make_reference_scenario
from offline_data import (
    KNRDataset,
    OfflineDataset,
    sample_dataset,
    sample_knr_dataset,
    transition_counts,
    uniform_offline,
)
from pspo import (
    DirichletPrior,
    DiscretePrior,
    MatrixNormalPrior,
    PosteriorSamplingOptimizer,
    bayesian_gap_estimate,
    exchangeability_check,
    lcb_gap_term,
    posterior_sample,
    posterior_sampling_plan,
    posterior_update,
    pspo_run,
)


def split(dataset, k):
    records = dataset.records
    first = OfflineDataset.from_records(records[:k], dataset.num_states, dataset.num_actions)
    second = OfflineDataset.from_records(records[k:], dataset.num_states, dataset.num_actions)
    return first, second


class TestDiscreteBelief:
    def test_empty_dataset_returns_prior(self):
        mdp, model_class = make_reference_scenario(0, 3, 2, 3, 5, 0.5)
        prior = DiscretePrior.uniform(model_class)
        assert posterior_update(prior, sample_dataset(mdp, uniform_offline(3, 2), 0)) is prior

    def test_update_order_does_not_matter(self):
        mdp, model_class = make_reference_scenario(1, 3, 2, 3, 6, 0.5)
        dataset = sample_dataset(mdp, uniform_offline(3, 2), 60, seed=1)
        first, second = split(dataset, 25)
        prior = DiscretePrior.uniform(model_class)
        combined = posterior_update(prior, dataset).weights
        forward = posterior_update(posterior_update(prior, first), second).weights
        backward = posterior_update(posterior_update(prior, second), first).weights
        np.testing.assert_allclose(forward, combined, atol=1e-10)
        np.testing.assert_allclose(backward, combined, atol=1e-10)

    def test_point_mass_stays_put(self):
        mdp, model_class = make_reference_scenario(2, 3, 2, 3, 5, 0.5)
        prior = DiscretePrior.point_mass(model_class, model_class.truth_index)
        posterior = posterior_update(prior, sample_dataset(mdp, uniform_offline(3, 2), 30, seed=2))
        np.testing.assert_array_equal(posterior.weights, prior.weights)
        assert posterior.observations == 30
        result = pspo_run(posterior, mdp, 5, 0.1, seed=0)
        assert set(result.sampled_model_ids) == {model_class.truth_index}

    def test_inconsistent_update(self):
        certain = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
        prior = DiscretePrior.uniform(FiniteModelClass(np.stack([certain, certain.copy()]), 0))
        dataset = OfflineDataset.from_records([{"s": 0, "a": 0, "r": 0.0, "sp": 1}], 2, 1)
        with pytest.raises(InconsistentClassError):
            posterior_update(prior, dataset)

    def test_rejects_weights_that_are_not_a_distribution(self):
        _, model_class = make_reference_scenario(0, 3, 2, 3, 2, 0.5)
        with pytest.raises(InvalidModelError):
            DiscretePrior(model_class, np.array([0.7, 0.7]))


class TestDirichletBelief:
    def test_update_adds_counts(self):
        mdp, _ = make_reference_scenario(3, 3, 2, 3, 2, 0.5)
        dataset = sample_dataset(mdp, uniform_offline(3, 2), 40, seed=3)
        prior = DirichletPrior.symmetric(3, 2, 0.5)
        posterior = posterior_update(prior, dataset)
        np.testing.assert_allclose(posterior.alpha, prior.alpha + transition_counts(dataset))

    def test_update_order_does_not_matter(self):
        mdp, _ = make_reference_scenario(4, 3, 2, 3, 2, 0.5)
        dataset = sample_dataset(mdp, uniform_offline(3, 2), 40, seed=4)
        first, second = split(dataset, 15)
        prior = DirichletPrior.symmetric(3, 2)
        forward = posterior_update(posterior_update(prior, first), second)
        backward = posterior_update(posterior_update(prior, second), first)
        np.testing.assert_allclose(forward.alpha, backward.alpha)

    def test_draws_are_transition_tables(self):
        draw = posterior_sample(DirichletPrior.symmetric(4, 2, 0.05), seed=0)
        np.testing.assert_allclose(draw.model.sum(axis=2), 1.0)
        assert draw.model_id is None

    def test_rejects_nonpositive_concentration(self):
        with pytest.raises(InvalidModelError):
            DirichletPrior(np.zeros((2, 1, 2)))


class TestMatrixNormalBelief:
    def test_posterior_mean_is_ridge_estimate(self):
        scenario = make_knr_scenario(0)
        dataset = sample_knr_dataset(scenario.model, 150, 3, np.zeros(2), 0.5, seed=0)
        prior = MatrixNormalPrior.isotropic(2, scenario.model.feature, 0.8, scenario.model.noise_sigma)
        posterior = posterior_update(prior, dataset)
        W_hat, sigma_n = ridge_mle_knr(dataset, scenario.model.feature, 0.8)
        np.testing.assert_allclose(posterior.mean, W_hat, atol=1e-9)
        np.testing.assert_allclose(posterior.precision, sigma_n + 0.8 * np.eye(sigma_n.shape[0]), atol=1e-12)

    def test_update_order_does_not_matter(self):
        scenario = make_knr_scenario(1)
        dataset = sample_knr_dataset(scenario.model, 80, 3, np.zeros(2), 0.5, seed=1)
        prior = MatrixNormalPrior.isotropic(2, scenario.model.feature, 1.0, scenario.model.noise_sigma)
        first, second = dataset.head(30), _tail(dataset, 30)
        forward = posterior_update(posterior_update(prior, first), second)
        backward = posterior_update(posterior_update(prior, second), first)
        np.testing.assert_allclose(forward.mean, backward.mean, atol=1e-9)

    def test_tabular_optimizer_refuses_matrix_normal(self):
        scenario = make_knr_scenario(2)
        prior = MatrixNormalPrior.isotropic(2, scenario.model.feature, 1.0, 0.1)
        mdp, _ = make_reference_scenario(0, 3, 2, 3, 2, 0.5)
        with pytest.raises(InvalidParameterError):
            pspo_run(prior, mdp, 3, 0.1)


def _tail(dataset, k):
    return KNRDataset(dataset.states[k:], dataset.actions[k:], dataset.rewards[k:], dataset.next_states[k:],
                      dataset.num_actions)


class TestPosteriorSamplingOptimizer:
    def test_eta_must_be_below_bound(self):
        mdp, _ = make_reference_scenario(0, 3, 2, 4, 2, 0.5)
        with pytest.raises(InvalidParameterError):
            PosteriorSamplingOptimizer(mdp, 5, 0.125)

    def test_zero_iterations_returns_uniform_policy(self):
        mdp, model_class = make_reference_scenario(0, 3, 2, 3, 4, 0.5)
        result = pspo_run(DiscretePrior.uniform(model_class), mdp, 0, 0.1, seed=0, truth=mdp)
        assert len(result.policies) == 1
        np.testing.assert_allclose(result.final_policy.action_probs, 0.5)
        assert result.best_iterate == 0

    def test_point_mass_at_truth_improves(self):
        mdp, model_class = make_reference_scenario(5, 4, 3, 4, 5, 0.5)
        prior = DiscretePrior.point_mass(model_class, model_class.truth_index)
        result = pspo_run(prior, mdp, 40, 0.12, seed=5, truth=mdp)
        assert result.values_under_truth[-1] > result.values_under_truth[0]
        assert len(result.rows()) == 41

    def test_frozen_posterior_gap_decays_in_T(self):
        T_grid = [1, 4, 16, 64, 256]
        gaps = []
        for seed in range(5):
            mdp, model_class = make_reference_scenario(seed, 3, 2, 3, 4, 0.5)
            _, optimal = plan_optimal(mdp)
            prior = DiscretePrior.point_mass(model_class, model_class.truth_index)
            result = pspo_run(prior, mdp, T_grid[-1], 0.16, seed=seed, truth=mdp)
            running_best = np.maximum.accumulate(result.values_under_truth)
            gaps.append([optimal - running_best[T] for T in T_grid])
        medians = np.median(gaps, axis=0)
        assert all(b <= a + 1e-12 for a, b in zip(medians, medians[1:]))
        assert loglog_slope(T_grid, medians) <= -0.3

    def test_same_seed_same_draws(self):
        mdp, model_class = make_reference_scenario(6, 3, 2, 3, 6, 0.5)
        prior = DiscretePrior.uniform(model_class)
        first = pspo_run(prior, mdp, 10, 0.1, seed=9)
        second = pspo_run(prior, mdp, 10, 0.1, seed=9)
        assert first.sampled_model_ids == second.sampled_model_ids

    def test_best_iterate_needs_truth(self):
        mdp, model_class = make_reference_scenario(6, 3, 2, 3, 6, 0.5)
        result = pspo_run(DiscretePrior.uniform(model_class), mdp, 2, 0.1, seed=0)
        with pytest.raises(InvalidParameterError):
            _ = result.best_iterate

    def test_posterior_sampling_plan_is_deterministic(self):
        mdp, model_class = make_reference_scenario(7, 3, 2, 3, 4, 0.5)
        policy = posterior_sampling_plan(DiscretePrior.uniform(model_class), mdp, seed=1)
        assert set(np.unique(policy.action_probs)) <= {0.0, 1.0}


class TestLcbGapTerm:
    @staticmethod
    def captured_space(model_class, dataset):
        space = build_version_space(model_class, mle_finite(model_class, dataset), dataset, ThresholdPolicy())
        if space.contains_truth:
            return space
        xi = float(space.distances[model_class.truth_index])
        return build_version_space(model_class, space.mle_index, dataset, ThresholdPolicy(), xi=xi)

    def test_non_negative_and_shrinks_with_n(self):
        terms = {10: [], 5000: []}
        for seed in range(5):
            mdp, model_class = make_reference_scenario(seed, 3, 2, 3, 8, 0.5)
            comparator, _ = plan_optimal(mdp)
            for n in terms:
                dataset = sample_dataset(mdp, uniform_offline(3, 2), n, seed=seed)
                term = lcb_gap_term(self.captured_space(model_class, dataset), comparator, mdp)
                assert term >= -1e-12
                terms[n].append(term)
        assert np.mean(terms[5000]) < np.mean(terms[10])

    def test_zero_for_the_truth_alone(self):
        mdp, model_class = make_reference_scenario(2, 3, 2, 3, 4, 0.5)
        comparator, _ = plan_optimal(mdp)
        assert lcb_gap_term(model_class.truth, comparator, mdp) == pytest.approx(0.0, abs=1e-12)


class TestBayesianGap:
    def test_discrete_prior_report(self):
        mdp, model_class = make_reference_scenario(8, 3, 2, 3, 4, 0.5)
        report = bayesian_gap_estimate(DiscretePrior.uniform(model_class), uniform_offline(3, 2), mdp, 50, 5, 0.1,
                                       10, seed=8)
        assert report.gaps.shape == (10,)
        assert np.all(report.gaps >= -1e-9)
        assert np.all(report.final_gaps >= report.gaps - 1e-12)
        assert report.lcb_terms is not None
        assert "C_dagger" in report.coverage

    def test_needs_ten_outer_trials(self):
        mdp, model_class = make_reference_scenario(8, 3, 2, 3, 4, 0.5)
        with pytest.raises(InvalidParameterError):
            bayesian_gap_estimate(DiscretePrior.uniform(model_class), uniform_offline(3, 2), mdp, 50, 5, 0.1, 3)

    def test_exchangeability_with_concentrated_posterior(self):
        mdp, model_class = make_reference_scenario(9, 3, 2, 3, 4, 0.5)
        dataset = sample_dataset(mdp, uniform_offline(3, 2), 100, seed=9)
        space = build_version_space(model_class, mle_finite(model_class, dataset), dataset, ThresholdPolicy())
        prior = DiscretePrior.point_mass(model_class, model_class.truth_index)
        report = exchangeability_check(posterior_update(prior, dataset), space, mdp, 20, seed=0)
        assert report.truth_side == pytest.approx(report.sample_side)
        assert report.agrees

    @pytest.mark.parametrize("seed", range(3))
    def test_exchangeability_with_spread_posterior(self, seed):
        mdp, model_class = make_reference_scenario(seed, 3, 2, 3, 6, 0.5)
        dataset = sample_dataset(mdp, uniform_offline(3, 2), 3, seed=seed)
        posterior = posterior_update(DiscretePrior.uniform(model_class), dataset)
        assert np.count_nonzero(posterior.weights > 0.01) >= 2
        space = build_version_space(model_class, mle_finite(model_class, dataset), dataset, ThresholdPolicy())
        report = exchangeability_check(posterior, space, mdp, 400, seed=seed)
        assert report.agrees


if __name__ == "__main__":
    pytest.main([__file__])
