#!/usr/bin/env python3
"""
Tests for MLE, threshold rules, version spaces, KNR confidence balls and threshold calibration
"""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from estimation import (
    KNRConfidenceBall,
    KNRFamily,
    ThresholdPolicy,
    build_version_space,
    calibrate_threshold,
    class_log_likelihoods,
    cppo_gap_bound,
    information_gain,
    knr_gap_bound,
    loglog_slope,
    lowrank_gap_bound,
    mle_finite,
    mle_tabular,
    pspo_gap_bound,
    ridge_mle_knr,
    rule_value,
    sample_tabular_version_space,
    tabular_gap_bound,
    verify_mle_guarantee,
)
from exceptions import EmptyDatasetError, InconsistentClassError, InvalidParameterError
from model_zoo import FiniteModelClass, make_knr_scenario, make_random_mdp, make_reference_scenario
from offline_data import (
    OfflineDataset,
    empirical_l1sq,
    sample_dataset,
    sample_knr_dataset,
    transition_counts,
    uniform_offline,
)


class TestThresholdPolicy:
    def test_finite_rule(self):
        policy = ThresholdPolicy(c1=2.0, c2=3.0, delta=0.1)
        assert policy.xi(100, class_size=20) == pytest.approx(2.0 * math.log(3.0 * 20 / 0.1) / 100)

    def test_tabular_rule(self):
        policy = ThresholdPolicy(rule="tabular", c1=1.0, c2=2.0, delta=0.05)
        expected = 3 ** 2 * 2 * math.log(50 * 6 * 2.0 / 0.05) / 50
        assert policy.xi(50, num_states=3, num_actions=2) == pytest.approx(expected)

    def test_lowrank_rule(self):
        policy = ThresholdPolicy(rule="lowrank", c1=1.5, delta=0.2)
        assert policy.xi(10, num_phi=4, num_mu=5) == pytest.approx(1.5 * math.log(20 / 0.2) / 10)

    def test_knr_rule_without_data_information(self):
        policy = ThresholdPolicy(rule="knr", delta=0.1, lam=2.0)
        xi = policy.xi(5, weight_norm=0.5, noise_sigma=0.1, state_dim=2, sigma_n=np.zeros((3, 3)))
        expected = math.sqrt(2 * 2.0 * 0.25 + 8 * 0.01 * (2 * math.log(5) + math.log(10)))
        assert xi == pytest.approx(expected)

    def test_missing_rule_input(self):
        with pytest.raises(InvalidParameterError):
            ThresholdPolicy(rule="tabular").xi(10, num_states=3)

    def test_rejects_empty_sample(self):
        with pytest.raises(InvalidParameterError):
            ThresholdPolicy().xi(0, class_size=3)

    def test_lowrank_rule_needs_lowrank_class(self):
        _, model_class = make_reference_scenario(0, 3, 2, 3, 4, 0.5)
        with pytest.raises(InvalidParameterError):
            rule_value(ThresholdPolicy(rule="lowrank"), model_class, 10)

    def test_lambda_alias_and_bounds(self):
        assert ThresholdPolicy.model_validate({"lambda": 0.5}).lam == 0.5
        with pytest.raises(ValidationError):
            ThresholdPolicy(delta=1.0)

    def test_information_gain_is_zero_without_data(self):
        assert information_gain(np.zeros((4, 4)), 1.0) == pytest.approx(0.0)
        assert information_gain(np.eye(2), 1.0) == pytest.approx(2 * math.log(2))


def _two_member_class(first, second):
    return FiniteModelClass(np.stack([first, second]), 0)


class TestMle:
    def test_zero_probability_observation_scores_minus_infinity(self):
        certain = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
        mixed = np.full((2, 1, 2), 0.5)
        dataset = OfflineDataset.from_records([{"s": 0, "a": 0, "r": 0.0, "sp": 1}], 2, 1)
        scores = class_log_likelihoods(np.stack([certain, mixed]), _counts(dataset))
        assert scores[0] == -np.inf
        assert mle_finite(_two_member_class(certain, mixed), dataset) == 1

    def test_ties_go_to_lowest_index(self):
        table = np.full((2, 1, 2), 0.5)
        dataset = OfflineDataset.from_records([{"s": 0, "a": 0, "r": 0.0, "sp": 1}], 2, 1)
        assert mle_finite(_two_member_class(table, table.copy()), dataset) == 0

    def test_inconsistent_class(self):
        certain = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
        dataset = OfflineDataset.from_records([{"s": 0, "a": 0, "r": 0.0, "sp": 1}], 2, 1)
        with pytest.raises(InconsistentClassError):
            mle_finite(_two_member_class(certain, certain.copy()), dataset)

    def test_empty_dataset(self):
        mdp, model_class = make_reference_scenario(0, 3, 2, 3, 4, 0.5)
        with pytest.raises(EmptyDatasetError):
            mle_finite(model_class, sample_dataset(mdp, uniform_offline(3, 2), 0))

    def test_large_sample_finds_truth(self):
        mdp, model_class = make_reference_scenario(1, 4, 2, 3, 10, 0.8)
        dataset = sample_dataset(mdp, uniform_offline(4, 2), 5000, seed=0)
        assert mle_finite(model_class, dataset) == model_class.truth_index

    def test_tabular_mle_rows(self):
        dataset = OfflineDataset.from_records(
            [{"s": 0, "a": 0, "r": 0.0, "sp": 1}, {"s": 0, "a": 0, "r": 0.0, "sp": 1},
             {"s": 0, "a": 0, "r": 0.0, "sp": 0}], 2, 2)
        table = mle_tabular(dataset, 2, 2)
        np.testing.assert_allclose(table[0, 0], [1 / 3, 2 / 3])
        np.testing.assert_allclose(table[1, 1], [0.5, 0.5])


def _counts(dataset):
    return transition_counts(dataset)[None]


class TestRidge:
    def test_normal_equations(self):
        scenario = make_knr_scenario(0)
        dataset = sample_knr_dataset(scenario.model, 200, 3, np.zeros(2), 0.5, seed=1)
        W_hat, sigma_n = ridge_mle_knr(dataset, scenario.model.feature, 0.7)
        phi = scenario.model.feature(dataset.states, dataset.actions)
        np.testing.assert_allclose(W_hat @ (sigma_n + 0.7 * np.eye(phi.shape[1])), dataset.next_states.T @ phi,
                                   atol=1e-8)
        np.testing.assert_allclose(sigma_n, phi.T @ phi)

    def test_recovers_weights_with_many_samples(self):
        scenario = make_knr_scenario(2, noise_sigma=0.01)
        dataset = sample_knr_dataset(scenario.model, 20000, 3, np.zeros(2), 1.0, seed=2)
        W_hat, _ = ridge_mle_knr(dataset, scenario.model.feature, 1e-3)
        np.testing.assert_allclose(W_hat, scenario.model.W, atol=0.01)

    def test_rejects_nonpositive_ridge(self):
        scenario = make_knr_scenario(0)
        dataset = sample_knr_dataset(scenario.model, 5, 3, np.zeros(2), 0.5, seed=0)
        with pytest.raises(InvalidParameterError):
            ridge_mle_knr(dataset, scenario.model.feature, 0.0)


class TestVersionSpaces:
    def test_contains_mle_and_grows_with_xi(self):
        mdp, model_class = make_reference_scenario(3, 4, 2, 3, 12, 0.5)
        dataset = sample_dataset(mdp, uniform_offline(4, 2), 300, seed=3)
        mle = mle_finite(model_class, dataset)
        space = build_version_space(model_class, mle, dataset, ThresholdPolicy())
        assert mle in space.member_indices
        assert set(space.members_at(0.0)) <= set(space.members_at(space.xi))
        assert set(space.members_at(space.xi)) <= set(space.members_at(10 * space.xi))
        assert len(space.members_at(4.0)) == model_class.size

    def test_members_within_threshold(self):
        mdp, model_class = make_reference_scenario(4, 3, 2, 3, 8, 0.5)
        dataset = sample_dataset(mdp, uniform_offline(3, 2), 100, seed=4)
        mle = mle_finite(model_class, dataset)
        space = build_version_space(model_class, mle, dataset, ThresholdPolicy(), xi=0.05)
        for i in space.member_indices:
            assert empirical_l1sq(dataset, model_class.models[i], model_class.models[mle]) <= 0.05

    def test_sampled_tabular_space(self):
        mdp, _ = make_reference_scenario(5, 3, 2, 3, 2, 0.5)
        dataset = sample_dataset(mdp, uniform_offline(3, 2), 200, seed=5)
        estimate = mle_tabular(dataset, 3, 2)
        space = sample_tabular_version_space(dataset, estimate, 0.2, 30, seed=5)
        np.testing.assert_allclose(space.truth, estimate)
        for member in space.models:
            assert empirical_l1sq(dataset, member, estimate) <= 0.2

    def test_knr_ball(self):
        scenario = make_knr_scenario(6)
        family = KNRFamily.from_model(scenario.model)
        dataset = sample_knr_dataset(scenario.model, 300, 3, np.zeros(2), 0.5, seed=6)
        mle = ridge_mle_knr(dataset, family.feature, 1.0)
        ball = build_version_space(family, mle, dataset, ThresholdPolicy(rule="knr"))
        assert ball.contains(ball.W_hat)
        assert ball.contains(scenario.model.W)
        for W in ball.sample_boundary(np.random.default_rng(0), 20):
            assert ball.contains(W)
            assert ball.distance(W) == pytest.approx(ball.xi, rel=1e-9)

    def test_knr_ball_without_data_samples_at_radius(self):
        ball = KNRConfidenceBall(np.zeros((2, 3)), np.zeros((3, 3)), 4.0, 0.5)
        for W in ball.sample_boundary(np.random.default_rng(1), 5):
            assert 2.0 * np.linalg.norm(W, 2) == pytest.approx(0.5)


class TestCalibration:
    def test_reaches_requested_coverage(self):
        mdp, model_class = make_reference_scenario(7, 3, 2, 3, 6, 0.5)
        result = calibrate_threshold(model_class, mdp, uniform_offline(3, 2), 50, 0.1, 100, seed=7)
        assert result.coverage >= 0.9
        assert result.multiplier >= 1e-12
        assert result.policy.c1 == result.multiplier

    def test_needs_enough_trials(self):
        mdp, model_class = make_reference_scenario(7, 3, 2, 3, 6, 0.5)
        with pytest.raises(InvalidParameterError):
            calibrate_threshold(model_class, mdp, uniform_offline(3, 2), 50, 0.1, 20)

    def test_mle_guarantee_report_shape(self):
        mdp, model_class = make_reference_scenario(8, 3, 2, 3, 6, 0.5)
        report = verify_mle_guarantee(model_class, mdp, uniform_offline(3, 2), [20, 80], 10, seed=8)
        assert report.errors.shape == (2, 10)
        assert len(report.rows()) == 20
        assert report.bounded[0]

    def test_mle_error_decays_at_the_parametric_rate(self):
        # one-parameter family (1 - e) Q + e U on a fine grid, truth in the interior
        mdp = make_random_mdp(5, 3, 2, 3)
        mixing = np.linspace(0.0, 1.0, 2001)[:, None, None, None]
        models = (1 - mixing) * mdp.transition[None] + mixing / 3
        model_class = FiniteModelClass(models, 1000)
        mdp_true = mdp.with_transition(model_class.truth)
        report = verify_mle_guarantee(model_class, mdp_true, uniform_offline(3, 2), [100, 400, 1600, 6400], 60,
                                      seed=5)
        assert all(b < a for a, b in zip(report.medians, report.medians[1:]))
        assert -1.3 <= report.slope <= -0.8
        assert report.decays


class TestGapBounds:
    def test_finite_class_bound(self):
        expected = 9 * math.sqrt(2.0 * math.log(math.e * 10 / 0.1) / 100)
        assert cppo_gap_bound(3, 2.0, 10, 100, 0.1) == pytest.approx(expected)

    def test_bounds_shrink_with_more_data(self):
        assert cppo_gap_bound(4, 1.5, 20, 1000, 0.1) < cppo_gap_bound(4, 1.5, 20, 100, 0.1)
        assert tabular_gap_bound(4, 1.5, 3, 2, 1000, 0.1) < tabular_gap_bound(4, 1.5, 3, 2, 100, 0.1)
        assert knr_gap_bound(4, 2.0, 3, 6, 2, 1000, 0.1) < knr_gap_bound(4, 2.0, 3, 6, 2, 100, 0.1)

    def test_tabular_bound(self):
        expected = 4 * math.sqrt(1.5 * 3 * 6 * math.log(50 * 6 * math.e / 0.1) / 50)
        assert tabular_gap_bound(2, 1.5, 3, 2, 50, 0.1) == pytest.approx(expected)

    def test_lowrank_bound(self):
        expected = math.sqrt(0.04) * math.sqrt(2) * (3 * math.sqrt(2.0) + 9 * math.sqrt(4.0 * 2 / 0.5))
        assert lowrank_gap_bound(3, 0.04, 2, 2.0, 4.0, 2, 0.5) == pytest.approx(expected)

    def test_pspo_bound_has_an_optimization_term(self):
        statistical = 4 * math.sqrt(2.0 * 3.0 / 100)
        assert pspo_gap_bound(2, 2.0, 3.0, 100, 4, 16) == pytest.approx(statistical + 4 * math.sqrt(math.log(4) / 16))
        assert pspo_gap_bound(2, 2.0, 3.0, 100, 4, 0) == math.inf


class TestLogLogSlope:
    def test_power_law(self):
        n = np.array([10, 100, 1000])
        assert loglog_slope(n, 3.0 / n) == pytest.approx(-1.0)

    def test_needs_two_positive_points(self):
        assert math.isnan(loglog_slope([10, 100], [0.0, 1.0]))


if __name__ == "__main__":
    pytest.main([__file__])
