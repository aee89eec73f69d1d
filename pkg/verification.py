#!/usr/bin/env python3
"""
Invariant verification suite
Features:
- Exactness checks for dynamic programming, occupancy measures and NPG updates
- Estimation, version-space and calibration checks on a small finite class
- Pessimism, brute-force agreement and gap decomposition checks for CPPO
- Conjugate-update order invariance for every belief type
- Coverage identities, Gaussian l1 bound, low-rank and thread-independence checks

Each invariant reports a status and its observed slack (positive means margin to spare).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from coverage import (
    bayesian_coverage,
    concentrability,
    gaussian_l1_bound_check,
    refined_concentrability,
    relative_condition_number,
)
from cppo import brute_force_maxmin, cppo_optimize, pessimism_decomposition, pessimistic_value
from estimation import (
    KNRConfidenceBall,
    ThresholdPolicy,
    build_version_space,
    calibrate_threshold,
    class_log_likelihoods,
    mle_finite,
    ridge_mle_knr,
)
from exceptions import OfflineRLError
from knr_planning import sample_scenario_dataset
from lowrank_offline import make_low_rank_scenario
from mdp_core import (
    PROB_TOL,
    TabularMDP,
    TimePolicy,
    check_transition_table,
    npg_step,
    occupancy,
    performance_difference,
    plan_optimal,
    policy_value,
    rollout_statistics,
    simulation_gap_bound,
)
from model_zoo import (
    knr_one_hot_embedding,
    make_finite_class,
    make_knr_scenario,
    make_partial_coverage_instance,
    make_random_mdp,
    make_random_transition,
    make_reference_scenario,
)
from offline_data import sample_dataset, transition_counts, uniform_offline
from pspo import DirichletPrior, DiscretePrior, MatrixNormalPrior, posterior_update
from trial_pool import map_trials

logger = logging.getLogger(__name__)

EXACT_TOL = 1e-9
CONJUGACY_TOL = 1e-10
RIDGE_TOL = 1e-8
BRUTE_FORCE_TOL = 1e-6
GAUSSIAN_TV_AT_ONE_SIGMA = 0.3829  # 2 Phi(1/2) - 1


@dataclass
class InvariantCheck:
    name: str
    passed: bool
    slack: float
    detail: str = ""

    def to_dict(self) -> Dict[str, Any]:
        slack = self.slack if math.isfinite(self.slack) else str(self.slack)
        return {"name": self.name, "status": "pass" if self.passed else "fail", "slack": slack,
                "detail": self.detail}


@dataclass
class VerificationReport:
    seed: int
    checks: List[InvariantCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failures(self) -> List[InvariantCheck]:
        return [check for check in self.checks if not check.passed]

    def to_dict(self) -> Dict[str, Any]:
        return {"seed": self.seed, "passed": self.passed, "count": len(self.checks),
                "checks": [check.to_dict() for check in self.checks]}


def _margin(tol: float, deviation: float) -> Tuple[bool, float]:
    return bool(deviation <= tol), float(tol - deviation)


class InvariantSuite:
    """Small fixed-scale instances built once from the seed; every check reuses them."""

    def __init__(self, seed: int = 0, corrupt_row: Optional[Tuple[int, int]] = None):
        self.seed = seed
        self.corrupt_row = corrupt_row
        self.rng = np.random.default_rng(seed)
        self.mdp = make_random_mdp(seed, 4, 3, 4)
        self.policies = [TimePolicy.random(self.rng, 4, 4, 3) for _ in range(20)]
        self.reference_mdp, self.model_class = make_reference_scenario(seed, 4, 3, 4, 8, 0.5)
        self.rho = uniform_offline(4, 3)
        self.dataset = sample_dataset(self.reference_mdp, self.rho, 400, seed)
        self.logger = logging.getLogger(__name__)
        self.checks: List[Tuple[str, Callable[[], Tuple[bool, float, str]]]] = [
            ("mdp_core.transition_rows_stochastic", self.transition_rows_stochastic),
            ("mdp_core.occupancy_normalized", self.occupancy_normalized),
            ("mdp_core.value_occupancy_duality", self.value_occupancy_duality),
            ("mdp_core.performance_difference_identity", self.performance_difference_identity),
            ("mdp_core.simulation_lemma", self.simulation_lemma),
            ("mdp_core.npg_shift_invariance", self.npg_shift_invariance),
            ("mdp_core.npg_simplex", self.npg_simplex),
            ("mdp_core.optimal_plan_dominates", self.optimal_plan_dominates),
            ("mdp_core.rollouts_match_dp", self.rollouts_match_dp),
            ("offline_data.samples_in_support", self.samples_in_support),
            ("estimation.mle_maximizes_likelihood", self.mle_maximizes_likelihood),
            ("estimation.version_space_contains_mle", self.version_space_contains_mle),
            ("estimation.ridge_normal_equations", self.ridge_normal_equations),
            ("estimation.knr_boundary_inside_ball", self.knr_boundary_inside_ball),
            ("estimation.calibrated_coverage", self.calibrated_coverage),
            ("cppo.pessimism_underestimates", self.pessimism_underestimates),
            ("cppo.brute_force_agreement", self.brute_force_agreement),
            ("cppo.gap_decomposition", self.gap_decomposition),
            ("pspo.empty_dataset_identity", self.empty_dataset_identity),
            ("pspo.discrete_order_invariance", self.discrete_order_invariance),
            ("pspo.dirichlet_order_invariance", self.dirichlet_order_invariance),
            ("pspo.matrix_normal_order_invariance", self.matrix_normal_order_invariance),
            ("coverage.refined_below_density_ratio", self.refined_below_density_ratio),
            ("coverage.one_hot_condition_number", self.one_hot_condition_number),
            ("coverage.degenerate_prior_exact", self.degenerate_prior_exact),
            ("coverage.gaussian_l1_bound", self.gaussian_l1_bound),
            ("lowrank.valid_products", self.lowrank_valid_products),
            ("lowrank.stationary_behavior", self.lowrank_stationary_behavior),
            ("trial_pool.thread_independence", self.thread_independence),
        ]

    def run(self) -> VerificationReport:
        report = VerificationReport(self.seed)
        for name, check in self.checks:
            try:
                passed, slack, detail = check()
            except OfflineRLError as e:
                passed, slack, detail = False, float("-inf"), f"{type(e).__name__}: {e}"
            report.checks.append(InvariantCheck(name, passed, slack, detail))
            status = "✅" if passed else "❌"
            self.logger.info(f"{status} {name} (slack {slack:.3g}) {detail}".rstrip())
        self.logger.info(f"🧪 {len(report.checks) - len(report.failures)}/{len(report.checks)} invariants passed")
        return report

    # mdp_core

    def transition_rows_stochastic(self):
        transition = np.array(self.mdp.transition)
        if self.corrupt_row is not None:
            s, a = self.corrupt_row
            transition[s, a, 0] += 0.1
        mdp = TabularMDP(transition, self.mdp.reward, self.mdp.initial_dist, self.mdp.horizon)
        check_transition_table(mdp.transition)
        ok, slack = _margin(PROB_TOL, float(np.abs(mdp.transition.sum(axis=2) - 1).max()))
        return ok, slack, ""

    def occupancy_normalized(self):
        deviation = max(float(np.abs(occupancy(self.mdp, p).per_step.sum(axis=(1, 2)) - 1).max())
                        for p in self.policies)
        return (*_margin(EXACT_TOL, deviation), "")

    def value_occupancy_duality(self):
        deviation = max(abs(policy_value(self.mdp, p) - float((occupancy(self.mdp, p).per_step * self.mdp.reward).sum()))
                        for p in self.policies)
        return (*_margin(EXACT_TOL, deviation), "")

    def performance_difference_identity(self):
        deviation = 0.0
        for _ in range(100):
            mdp = self.mdp.with_transition(make_random_transition(self.rng, 4, 3))
            lhs, rhs = performance_difference(mdp, TimePolicy.random(self.rng, 4, 4, 3),
                                              TimePolicy.random(self.rng, 4, 4, 3))
            deviation = max(deviation, abs(lhs - rhs))
        return (*_margin(EXACT_TOL, deviation), "100 triples")

    def simulation_lemma(self):
        slack = float("inf")
        for _ in range(200):
            alt = self.mdp.with_transition(make_random_transition(self.rng, 4, 3))
            gap, bound = simulation_gap_bound(self.mdp, alt, TimePolicy.random(self.rng, 4, 4, 3))
            slack = min(slack, bound - gap)
        return slack >= -EXACT_TOL, slack, "200 triples"

    def npg_shift_invariance(self):
        policy = self.policies[0]
        advantage = self.rng.normal(size=policy.action_probs.shape)
        shift = self.rng.normal(size=policy.action_probs.shape[:2])[:, :, None]
        base = npg_step(policy, advantage, 0.1).action_probs
        shifted = npg_step(policy, advantage + shift, 0.1).action_probs
        return (*_margin(EXACT_TOL, float(np.abs(base - shifted).max())), "")

    def npg_simplex(self):
        policy = self.policies[1]
        updated = npg_step(policy, self.rng.normal(scale=4.0, size=policy.action_probs.shape), 0.1)
        deviation = float(np.abs(updated.action_probs.sum(axis=2) - 1).max())
        return (*_margin(PROB_TOL, deviation), "")

    def optimal_plan_dominates(self):
        _, optimal = plan_optimal(self.mdp)
        slack = min(optimal - policy_value(self.mdp, p) for p in self.policies)
        return slack >= -EXACT_TOL, slack, ""

    def rollouts_match_dp(self):
        policy = self.policies[2]
        mean, stderr, _ = rollout_statistics(self.mdp, policy, 20000, self.seed)
        difference = abs(mean - policy_value(self.mdp, policy))
        return difference <= 4 * stderr, 4 * stderr - difference, "4 standard errors"

    # offline_data

    def samples_in_support(self):
        mdp, rho, _ = make_partial_coverage_instance(self.seed, 5, 3, 4)
        dataset = sample_dataset(mdp, rho, 500, self.seed)
        outside = int((~rho.support[dataset.states, dataset.actions]).sum())
        return outside == 0, float(-outside), f"{outside} records outside supp(rho)"

    # estimation

    def mle_maximizes_likelihood(self):
        scores = class_log_likelihoods(self.model_class.models, transition_counts(self.dataset))
        mle = mle_finite(self.model_class, self.dataset)
        return scores[mle] >= scores.max(), float(scores[mle] - scores.max()), f"mle={mle}"

    def version_space_contains_mle(self):
        mle = mle_finite(self.model_class, self.dataset)
        space = build_version_space(self.model_class, mle, self.dataset, ThresholdPolicy())
        return mle in space.member_indices, float(space.xi - space.distances[mle]), f"|M_D|={space.size}"

    def ridge_normal_equations(self):
        scenario = make_knr_scenario(self.seed)
        dataset = sample_scenario_dataset(scenario, 300, self.seed)
        W_hat, sigma_n = ridge_mle_knr(dataset, scenario.model.feature, 1.0)
        phi = scenario.model.feature(dataset.states, dataset.actions)
        residual = W_hat @ (sigma_n + np.eye(sigma_n.shape[0])) - dataset.next_states.T @ phi
        scale = max(1.0, float(np.abs(dataset.next_states.T @ phi).max()))
        return (*_margin(RIDGE_TOL, float(np.abs(residual).max()) / scale), "")

    def knr_boundary_inside_ball(self):
        scenario = make_knr_scenario(self.seed)
        dataset = sample_scenario_dataset(scenario, 200, self.seed)
        W_hat, sigma_n = ridge_mle_knr(dataset, scenario.model.feature, 1.0)
        ball = KNRConfidenceBall(W_hat, sigma_n, 1.0, 0.5)
        samples = ball.sample_boundary(self.rng, 32)
        slack = min(ball.xi - ball.distance(W) for W in samples)
        return all(ball.contains(W) for W in samples), slack, "32 samples"

    def calibrated_coverage(self):
        calibration = calibrate_threshold(self.model_class, self.reference_mdp, self.rho, 200, 0.1, 100, self.seed)
        return calibration.coverage >= 0.9, calibration.coverage - 0.9, f"c1={calibration.multiplier:.4g}"

    # cppo

    def _captured_space(self):
        mle = mle_finite(self.model_class, self.dataset)
        space = build_version_space(self.model_class, mle, self.dataset, ThresholdPolicy())
        if not space.contains_truth:
            truth_distance = float(space.distances[self.model_class.truth_index])
            space = build_version_space(self.model_class, mle, self.dataset, ThresholdPolicy(), xi=truth_distance)
        return space

    def pessimism_underestimates(self):
        space = self._captured_space()
        probes = self.policies + [TimePolicy.random(self.rng, 4, 4, 3) for _ in range(80)]
        slack = min(policy_value(self.reference_mdp, p) - pessimistic_value(space, self.reference_mdp, p)[0]
                    for p in probes)
        return slack >= -EXACT_TOL, slack, f"{len(probes)} probes"

    def brute_force_agreement(self):
        slack = float("inf")
        for i in range(5):
            mdp = make_random_mdp(self.seed + 100 + i, 2, 2, 2)
            members = np.stack([mdp.transition] + [make_random_transition(self.rng, 2, 2) for _ in range(4)])
            _, brute = brute_force_maxmin(members, mdp)
            result = cppo_optimize(members, mdp, 100, 0.2)
            slack = min(slack, result.pessimistic_value - brute + BRUTE_FORCE_TOL)
        return slack >= 0, slack, "5 instances, S=A=H=2"

    def gap_decomposition(self):
        space = self._captured_space()
        comparator, _ = plan_optimal(self.reference_mdp)
        result = cppo_optimize(space, self.reference_mdp, 50, 0.1)
        parts = pessimism_decomposition(result, comparator, self.reference_mdp, space)
        slack = parts.estimation_term + max(parts.optimization_term, 0.0) - parts.gap
        return parts.holds, slack, ""

    # pspo

    def _two_datasets(self):
        return (sample_dataset(self.reference_mdp, self.rho, 150, self.seed + 1),
                sample_dataset(self.reference_mdp, self.rho, 250, self.seed + 2))

    def empty_dataset_identity(self):
        prior = DirichletPrior.symmetric(4, 3)
        empty = sample_dataset(self.reference_mdp, self.rho, 0, self.seed)
        return posterior_update(prior, empty) is prior, 0.0, ""

    def discrete_order_invariance(self):
        first, second = self._two_datasets()
        prior = DiscretePrior.uniform(self.model_class)
        forward = posterior_update(posterior_update(prior, first), second).weights
        backward = posterior_update(posterior_update(prior, second), first).weights
        return (*_margin(CONJUGACY_TOL, float(np.abs(forward - backward).max())), "")

    def dirichlet_order_invariance(self):
        first, second = self._two_datasets()
        prior = DirichletPrior.symmetric(4, 3, 0.5)
        forward = posterior_update(posterior_update(prior, first), second).alpha
        backward = posterior_update(posterior_update(prior, second), first).alpha
        return (*_margin(CONJUGACY_TOL, float(np.abs(forward - backward).max())), "")

    def matrix_normal_order_invariance(self):
        scenario = make_knr_scenario(self.seed)
        first = sample_scenario_dataset(scenario, 100, self.seed + 1)
        second = sample_scenario_dataset(scenario, 150, self.seed + 2)
        prior = MatrixNormalPrior.isotropic(scenario.model.state_dim, scenario.model.feature, 1.0,
                                            scenario.model.noise_sigma)
        forward = posterior_update(posterior_update(prior, first), second)
        backward = posterior_update(posterior_update(prior, second), first)
        deviation = max(float(np.abs(forward.mean - backward.mean).max()),
                        float(np.abs(forward.precision - backward.precision).max()) / forward.precision.max())
        return (*_margin(CONJUGACY_TOL, deviation), "")

    # coverage

    def refined_below_density_ratio(self):
        slack = float("inf")
        for i in range(100):
            model_class = make_finite_class(self.seed + 200 + i, 3, 2, 5, 0.5)
            mdp = make_random_mdp(self.seed + 300 + i, 3, 2, 3, transition=model_class.truth)
            comparator = TimePolicy.random(self.rng, 3, 3, 2)
            rho = self.rng.dirichlet(np.ones(6)).reshape(3, 2)
            C = concentrability(comparator, mdp, rho)
            refined = refined_concentrability(model_class, comparator, mdp, rho)
            slack = min(slack, C - refined)
        return slack >= -EXACT_TOL, slack, "100 classes"

    def one_hot_condition_number(self):
        comparator, _ = plan_optimal(self.reference_mdp)
        feature = knr_one_hot_embedding(4, 3)
        rho = self.rng.dirichlet(np.ones(12)).reshape(4, 3)
        C = concentrability(comparator, self.reference_mdp, rho)
        kappa = relative_condition_number(feature, occupancy(self.reference_mdp, comparator), rho)
        return (*_margin(EXACT_TOL, abs(C - kappa) / max(C, 1.0)), f"C={C:.6g}")

    def degenerate_prior_exact(self):
        prior = DiscretePrior.point_mass(self.model_class, self.model_class.truth_index)
        report = bayesian_coverage(prior, self.rho, self.reference_mdp, 10, self.seed)
        comparator, _ = plan_optimal(self.reference_mdp)
        C = concentrability(comparator, self.reference_mdp, self.rho)
        refined = refined_concentrability(self.model_class, comparator, self.reference_mdp, self.rho)
        exact = report.mean("C") == C and report.mean("C_dagger") == refined
        deviation = abs(report.mean("C") - C) + abs(report.mean("C_dagger") - refined)
        return exact, -deviation, ""

    def gaussian_l1_bound(self):
        slack = float("inf")
        for zeta in (0.1, 1.0, 10.0):
            l1, bound = gaussian_l1_bound_check(np.zeros(1), np.array([zeta]), zeta)
            slack = min(slack, bound - l1, 1e-3 - abs(l1 / 2 - GAUSSIAN_TV_AT_ONE_SIGMA))
        return slack >= 0, slack, "zeta in {0.1, 1, 10}"

    # lowrank_offline

    def lowrank_valid_products(self):
        scenario = make_low_rank_scenario(self.seed)
        deviation = max(float(np.abs(model.sum(axis=2) - 1).max()) for model in scenario.model_class.models)
        negative = min(float(model.min()) for model in scenario.model_class.models)
        ok = deviation <= EXACT_TOL and negative >= 0
        return ok, min(EXACT_TOL - deviation, negative), f"{scenario.model_class.size} valid pairs"

    def lowrank_stationary_behavior(self):
        scenario = make_low_rank_scenario(self.seed)
        return (*_margin(1e-8, scenario.rho.stationarity_gap), "")

    # trial_pool

    def thread_independence(self):
        def draw(index: int, trial_seed: int) -> float:
            return float(np.random.default_rng(trial_seed).random())

        single = map_trials(draw, 16, self.seed, threads=1)
        pooled = map_trials(draw, 16, self.seed, threads=4)
        return single == pooled, 0.0, ""


def verify_all(seed: int = 0, corrupt_row: Optional[Tuple[int, int]] = None) -> VerificationReport:
    """Run every invariant at fixed small scale; `corrupt_row` breaks one transition row on purpose."""
    return InvariantSuite(seed, corrupt_row).run()
