#!/usr/bin/env python3
"""
Tests for scenario construction: finite classes, the partial-coverage trap, low-rank grids and KNRs
"""

import numpy as np
import pytest

from exceptions import DimensionMismatchError, InvalidModelError, InvalidParameterError
from mdp_core import TimePolicy, plan_optimal, policy_value
from model_zoo import (
    ActionBlockFeature,
    FiniteModelClass,
    KNRModel,
    LowRankModelClass,
    knr_one_hot_embedding,
    load_scenario,
    low_rank_product,
    make_finite_class,
    make_knr_scenario,
    make_low_rank_class,
    make_partial_coverage_instance,
    make_reference_scenario,
    make_trap_class,
    save_scenario,
)


class TestFiniteClass:
    def test_reference_scenario_is_realizable(self):
        mdp, model_class = make_reference_scenario(0, 6, 3, 5, 20, 0.5)
        assert model_class.size == 20
        np.testing.assert_array_equal(mdp.transition, model_class.truth)

    def test_same_seed_same_class(self):
        first = make_finite_class(7, 4, 2, 5, 0.3)
        second = make_finite_class(7, 4, 2, 5, 0.3)
        np.testing.assert_array_equal(first.models, second.models)
        assert first.truth_index == second.truth_index

    def test_rejects_zero_perturbation(self):
        with pytest.raises(InvalidParameterError):
            make_finite_class(0, 3, 2, 4, 0.0)

    def test_rejects_invalid_member(self):
        models = np.full((2, 2, 1, 2), 0.5)
        models[1, 0, 0] = [0.9, 0.2]
        with pytest.raises(InvalidModelError):
            FiniteModelClass(models, 0)

    def test_subset_keeps_truth(self):
        model_class = make_finite_class(1, 3, 2, 6, 0.5)
        others = [i for i in range(6) if i != model_class.truth_index][:2]
        subset = model_class.subset(others)
        assert subset.size == 3
        np.testing.assert_array_equal(subset.truth, model_class.truth)

    def test_class_document_round_trip(self, tmp_path):
        mdp, model_class = make_reference_scenario(2, 3, 2, 3, 4, 0.5)
        path = tmp_path / "scenario.json"
        save_scenario(path, model_class.to_dict(mdp))
        loaded_mdp, loaded = FiniteModelClass.from_dict(load_scenario(path))
        np.testing.assert_array_equal(loaded.models, model_class.models)
        assert loaded.truth_index == model_class.truth_index
        assert loaded_mdp.horizon == 3


class TestTrap:
    def test_rho_never_covers_bait_pairs(self):
        mdp, rho, comparator = make_partial_coverage_instance(0, 5, 2, 5)
        assert not rho.support[0, 1:].any()
        assert rho.support[0, 0]
        assert comparator.action_probs[0, 0, 0] == 1.0

    def test_comparator_is_optimal_under_truth(self):
        mdp, _, comparator = make_partial_coverage_instance(3, 5, 3, 5)
        _, optimal = plan_optimal(mdp)
        assert policy_value(mdp, comparator) == pytest.approx(optimal, abs=1e-12)

    def test_decoys_are_optimistic_off_support(self):
        mdp, rho, _ = make_partial_coverage_instance(1, 5, 2, 5)
        model_class = make_trap_class(2, mdp, rho, 10, 0.5)
        truth_bait = policy_value(mdp, _bait_policy(mdp))
        for i, member in enumerate(model_class.models):
            if i == model_class.truth_index:
                continue
            assert policy_value(mdp.with_transition(member), _bait_policy(mdp)) > truth_bait

    def test_agreeing_decoys_match_truth_on_covered_pairs(self):
        mdp, rho, _ = make_partial_coverage_instance(4, 5, 2, 5)
        model_class = make_trap_class(5, mdp, rho, 11, 0.5, agreeing_fraction=0.5)
        covered = rho.support
        agreeing = [i for i, m in enumerate(model_class.models)
                    if i != model_class.truth_index and np.array_equal(m[covered], mdp.transition[covered])]
        assert len(agreeing) == 5

    def test_needs_three_states(self):
        with pytest.raises(InvalidParameterError):
            make_partial_coverage_instance(0, 2, 2, 3)


def _bait_policy(mdp):
    actions = np.zeros((mdp.horizon, mdp.num_states), dtype=int)
    actions[0, 0] = 1
    return TimePolicy.deterministic(actions, mdp.num_actions)


class TestLowRank:
    def test_products_are_valid_tables(self):
        model_class = make_low_rank_class(0, 6, 2, 3, 3, 3, num_signed_mu=2)
        for model in model_class.models:
            assert model.min() >= 0
            np.testing.assert_allclose(model.sum(axis=2), 1.0, atol=1e-9)

    def test_truth_matches_true_pair(self):
        model_class = make_low_rank_class(1, 5, 2, 3, 3, 3)
        i_mu, i_phi = model_class.truth_pair
        np.testing.assert_allclose(model_class.truth,
                                   low_rank_product(model_class.mu_set[i_mu], model_class.phi_set[i_phi]),
                                   atol=1e-12)
        np.testing.assert_array_equal(model_class.true_feature, model_class.phi_set[i_phi])

    def test_signed_candidates_are_filtered(self):
        model_class = make_low_rank_class(2, 6, 2, 3, 3, 3, num_signed_mu=4)
        assert model_class.size <= 3 * 7
        assert all(i_mu < 7 for i_mu, _ in model_class.pairs)

    def test_one_hot_features(self):
        model_class = make_low_rank_class(3, 4, 2, 3, 2, 2, phi_kind="one_hot")
        np.testing.assert_array_equal(model_class.phi_set.sum(axis=3), 1.0)

    def test_rejects_truth_outside_valid_pairs(self):
        phi_set = np.full((1, 2, 1, 1), 1.0)
        mu_set = np.array([[[0.5], [0.5]], [[1.5], [-0.5]]])
        with pytest.raises(InvalidModelError):
            LowRankModelClass(phi_set, mu_set, (1, 0))

    def test_as_finite_class(self):
        model_class = make_low_rank_class(4, 4, 2, 2, 2, 2)
        finite = model_class.as_finite_class()
        assert finite.size == model_class.size
        np.testing.assert_array_equal(finite.truth, model_class.truth)


class TestKNR:
    def test_action_block_feature_norm(self):
        feature = ActionBlockFeature(3, 2)
        states = np.random.default_rng(0).normal(scale=10, size=(50, 3))
        phi = feature(states, np.arange(50) % 2)
        assert phi.shape == (50, 8)
        assert np.linalg.norm(phi, axis=1).max() <= 1 + 1e-12

    def test_one_hot_embedding(self):
        feature = knr_one_hot_embedding(3, 2)
        assert feature.dim == 6
        np.testing.assert_array_equal(feature([2], [1]), np.eye(6)[[5]])

    def test_mean_next_is_linear(self):
        scenario = make_knr_scenario(0)
        model = scenario.model
        states = np.zeros((4, model.state_dim))
        actions = np.arange(4) % 3
        np.testing.assert_allclose(model.mean_next(states, actions), model.feature(states, actions) @ model.W.T)

    def test_weight_shape_must_match_feature(self):
        with pytest.raises(DimensionMismatchError):
            KNRModel(np.zeros((2, 5)), ActionBlockFeature(2, 3), 0.1)

    def test_scenario_spectral_norm(self):
        scenario = make_knr_scenario(1, weight_scale=0.5)
        assert np.linalg.norm(scenario.model.W, 2) == pytest.approx(0.5)
        assert len(scenario.candidate_policies) == 8


if __name__ == "__main__":
    pytest.main([__file__])
