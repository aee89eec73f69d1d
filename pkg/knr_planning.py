#!/usr/bin/env python3
"""
KNR planning at desk scale
Features:
- Monte Carlo evaluation of state-feedback policies with common random numbers
- Pessimistic selection over a finite candidate set against confidence-ball samples
- Posterior-sampling weights over the candidate set under a matrix-normal belief
- Repeated-draw feasibility of the KNR confidence ball
- Rollout feature moments, relative condition number and gap bound of a candidate
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from coverage import moment_condition_number, numerical_rank
from estimation import (
    KNRConfidenceBall,
    KNRFamily,
    ThresholdPolicy,
    build_version_space,
    knr_gap_bound,
    ridge_mle_knr,
)
from exceptions import EmptyDatasetError, InvalidParameterError
from model_zoo import KNRScenario, SoftmaxFeedbackPolicy
from offline_data import KNRDataset, sample_knr_dataset
from pspo import MatrixNormalPrior, posterior_update
from trial_pool import map_trials

logger = logging.getLogger(__name__)

DEFAULT_BOUNDARY_SAMPLES = 64
DEFAULT_ROLLOUTS = 400


def sample_scenario_dataset(scenario: KNRScenario, n: int, seed: Optional[int] = None,
                            state_spread: float = 2.0) -> KNRDataset:
    """Offline data with states spread `state_spread` times wider than the initial distribution"""
    return sample_knr_dataset(scenario.model, n, len(scenario.action_set), scenario.initial_mean,
                              state_spread * scenario.initial_std, seed, scenario.reward)


class RolloutEvaluator:
    """Fixed initial states, noise and action uniforms shared by every (policy, W) evaluation."""

    def __init__(self, scenario: KNRScenario, num_rollouts: int = DEFAULT_ROLLOUTS, seed: Optional[int] = None):
        rng = np.random.default_rng(seed)
        d = scenario.model.state_dim
        self.scenario = scenario
        self.initial = scenario.initial_mean + scenario.initial_std * rng.standard_normal((num_rollouts, d))
        self.noise = rng.standard_normal((scenario.horizon, num_rollouts, d))
        self.uniforms = rng.random((scenario.horizon, num_rollouts))

    def _actions(self, policy: SoftmaxFeedbackPolicy, states: np.ndarray, h: int) -> np.ndarray:
        cumulative = np.cumsum(policy.action_probs(states), axis=1)
        return np.minimum((self.uniforms[h][:, None] > cumulative).sum(axis=1), cumulative.shape[1] - 1)

    def value(self, policy: SoftmaxFeedbackPolicy, W: np.ndarray) -> float:
        scenario = self.scenario
        model = scenario.model
        states = self.initial
        total = np.zeros(states.shape[0])
        for h in range(scenario.horizon):
            actions = self._actions(policy, states, h)
            total += scenario.reward(states, actions)
            states = model.feature(states, actions) @ W.T + model.noise_sigma * self.noise[h]
        return float(total.mean())

    def feature_moment(self, policy: SoftmaxFeedbackPolicy, W: np.ndarray) -> np.ndarray:
        """E[phi phi^T] under the policy's step-averaged occupancy"""
        model = self.scenario.model
        states = self.initial
        moment = np.zeros((model.feature.dim, model.feature.dim))
        for h in range(self.scenario.horizon):
            phi = model.feature(states, self._actions(policy, states, h))
            moment += phi.T @ phi / phi.shape[0]
            states = phi @ W.T + model.noise_sigma * self.noise[h]
        return moment / self.scenario.horizon

    def value_table(self, policies: List[SoftmaxFeedbackPolicy], weights: List[np.ndarray]) -> np.ndarray:
        return np.array([[self.value(policy, W) for W in weights] for policy in policies])


@dataclass
class KnrCppoResult:
    policy_index: int
    pessimistic_value: float
    values: np.ndarray  # (policies, models); column 0 is the ball center
    ball: KNRConfidenceBall
    diagnostics: Dict[str, Any] = field(default_factory=dict)


def knr_cppo(scenario: KNRScenario, dataset: KNRDataset, threshold: ThresholdPolicy,
             num_boundary: int = DEFAULT_BOUNDARY_SAMPLES, num_rollouts: int = DEFAULT_ROLLOUTS,
             seed: Optional[int] = None, weight_norm: Optional[float] = None) -> KnrCppoResult:
    """Approximate max-min: inner min over the ball center and boundary samples, outer max over candidates."""
    rng = np.random.default_rng(seed)
    family = KNRFamily.from_model(scenario.model, weight_norm)
    mle = ridge_mle_knr(dataset, family.feature, threshold.lam)
    ball = build_version_space(family, mle, dataset, threshold)
    weights = [ball.W_hat] + ball.sample_boundary(rng, num_boundary)
    evaluator = RolloutEvaluator(scenario, num_rollouts, int(rng.integers(2 ** 63)))
    values = evaluator.value_table(list(scenario.candidate_policies), weights)
    pessimistic = values.min(axis=1)
    best = int(np.argmax(pessimistic))
    logger.info(f"🤖 KNR CPPO picked candidate {best} (pessimistic value {pessimistic[best]:.4f})")
    diagnostics = {
        "xi": ball.xi,
        "truth_in_ball": ball.contains(scenario.model.W),
        "true_values": [evaluator.value(p, scenario.model.W) for p in scenario.candidate_policies],
    }
    return KnrCppoResult(best, float(pessimistic[best]), values, ball, diagnostics)


@dataclass
class KnrPspoResult:
    weights: List[np.ndarray]  # mixture weights over candidates, per iteration
    eta: float
    T: int
    values_under_truth: Optional[List[float]] = None


def knr_pspo(scenario: KNRScenario, posterior: MatrixNormalPrior, T: int, eta: float,
             num_rollouts: int = DEFAULT_ROLLOUTS, seed: Optional[int] = None) -> KnrPspoResult:
    """Multiplicative weights over the candidate set, one fresh W ~ posterior per iteration."""
    bound = 1 / (2 * scenario.horizon)
    if not 0 < eta < bound:
        raise InvalidParameterError("eta", eta, f"in (0, 1/(2H)) = (0, {bound:.6g})")
    rng = np.random.default_rng(seed)
    evaluator = RolloutEvaluator(scenario, num_rollouts, int(rng.integers(2 ** 63)))
    policies = list(scenario.candidate_policies)
    mixture = np.full(len(policies), 1.0 / len(policies))
    history = [mixture]
    for _ in range(T):
        W = posterior.sample(rng).model
        values = np.array([evaluator.value(p, W) for p in policies])
        advantage = values - mixture @ values
        logits = eta * (advantage - advantage.max())
        mixture = mixture * np.exp(logits)
        mixture = mixture / mixture.sum()
        history.append(mixture)
    true_values = np.array([evaluator.value(p, scenario.model.W) for p in policies])
    return KnrPspoResult(history, eta, T, [float(w @ true_values) for w in history])


def knr_ball_feasibility(scenario: KNRScenario, n: int, trials: int, threshold: ThresholdPolicy,
                         seed: Optional[int] = None, threads: Optional[int] = None) -> np.ndarray:
    """Per-trial membership of W* in the confidence ball built from a fresh dataset"""
    family = KNRFamily.from_model(scenario.model)

    def trial(index: int, trial_seed: int) -> bool:
        dataset = sample_scenario_dataset(scenario, n, trial_seed)
        ball = build_version_space(family, ridge_mle_knr(dataset, family.feature, threshold.lam), dataset, threshold)
        return ball.contains(scenario.model.W)

    return np.array(map_trials(trial, trials, seed, threads), dtype=bool)


def knr_posterior(scenario: KNRScenario, dataset: KNRDataset, lam: float) -> MatrixNormalPrior:
    prior = MatrixNormalPrior.isotropic(scenario.model.state_dim, scenario.model.feature, lam,
                                        scenario.model.noise_sigma)
    return posterior_update(prior, dataset)


@dataclass(frozen=True)
class KnrCoverage:
    rel_cond_number: float
    rank_sigma_rho: int
    bound: float


def knr_coverage(scenario: KNRScenario, dataset: KNRDataset, comparator_index: int, delta: float,
                 num_rollouts: int = DEFAULT_ROLLOUTS, seed: Optional[int] = None) -> KnrCoverage:
    """Relative condition number of a candidate against the data, and the KNR gap bound it implies"""
    model = scenario.model
    if dataset.n == 0:
        raise EmptyDatasetError("KNR coverage needs at least one transition")
    phi = model.feature(dataset.states, dataset.actions)
    sigma_rho = phi.T @ phi / dataset.n
    evaluator = RolloutEvaluator(scenario, num_rollouts, seed)
    sigma_comparator = evaluator.feature_moment(scenario.candidate_policies[comparator_index], model.W)
    rel_cond = moment_condition_number(sigma_comparator, sigma_rho)
    rank = numerical_rank(sigma_rho)
    bound = knr_gap_bound(scenario.horizon, rel_cond, rank, model.feature.dim, model.state_dim, dataset.n, delta)
    return KnrCoverage(rel_cond, rank, bound)
