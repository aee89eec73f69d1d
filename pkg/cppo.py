#!/usr/bin/env python3
"""
Constrained pessimistic policy optimization
Features:
- Pessimistic evaluation: exact minimum value over the version space
- Max-min policy search by best-response NPG with best-iterate selection
- Deterministic polish of the best iterate (greedy rounding, member-optimal starts, coordinate ascent)
- Certainty-equivalent baseline and a brute-force max-min oracle for tiny instances
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from estimation import ThresholdPolicy, VersionSpace, build_version_space, mle_finite
from exceptions import EmptyVersionSpaceError, InvalidParameterError
from mdp_core import (
    TabularMDP,
    TimePolicy,
    enumerate_deterministic_policies,
    evaluate_policy,
    npg_step,
    plan_optimal,
    policy_value,
)
from model_zoo import FiniteModelClass
from offline_data import OfflineDataset

logger = logging.getLogger(__name__)

IMPROVEMENT_TOL = 1e-12
MAX_POLISH_PASSES = 5


@dataclass
class CppoResult:
    policy: TimePolicy
    pessimistic_value: float
    worst_model_index: int
    iterations: int
    trajectory: List[Tuple[int, float, int]] = field(default_factory=list)
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def trajectory_rows(self) -> List[Dict[str, Any]]:
        return [
            {"iteration": t, "pessimistic_value": value, "worst_model_index": worst}
            for t, value, worst in self.trajectory
        ]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "pessimistic_value": self.pessimistic_value,
            "worst_model_index": self.worst_model_index,
            "iterations": self.iterations,
            "policy": self.policy.to_dict(),
            "diagnostics": self.diagnostics,
        }


def _members(version_space: Union[VersionSpace, np.ndarray]) -> Tuple[np.ndarray, Sequence[int]]:
    """(member tables, labels reported as worst-model indices)"""
    if isinstance(version_space, VersionSpace):
        return version_space.models, version_space.member_indices
    models = np.asarray(version_space, dtype=float)
    if models.ndim == 3:
        models = models[None]
    return models, range(models.shape[0])


def pessimistic_value(version_space: Union[VersionSpace, np.ndarray], mdp: TabularMDP,
                      policy: TimePolicy) -> Tuple[float, int]:
    """min over members of V^pi_P; only the reward, d0 and horizon of `mdp` are used."""
    models, labels = _members(version_space)
    if models.shape[0] == 0:
        raise EmptyVersionSpaceError("Pessimistic evaluation over an empty version space")
    values = [evaluate_policy(mdp.with_transition(model), policy).value for model in models]
    worst = int(np.argmin(values))
    return float(values[worst]), int(labels[worst])


class CppoOptimizer:
    """Best-response NPG on the version-space max-min, followed by a deterministic polish."""

    def __init__(self, mdp: TabularMDP, T: int, eta: float, mode: str = "per_step", polish: bool = True):
        if T < 1:
            raise InvalidParameterError("T", T, ">= 1")
        if not 0 < eta < 1 / (2 * mdp.horizon):
            raise InvalidParameterError("eta", eta, f"in (0, 1/(2H)) = (0, {1 / (2 * mdp.horizon):.6g})")
        self.mdp = mdp
        self.T = T
        self.eta = eta
        self.mode = mode
        self.polish = polish
        self.logger = logging.getLogger(__name__)

    def optimize(self, version_space: Union[VersionSpace, np.ndarray]) -> CppoResult:
        models, labels = _members(version_space)
        label_position = {int(label): i for i, label in enumerate(labels)}
        policy = TimePolicy.uniform(self.mdp.horizon, self.mdp.num_states, self.mdp.num_actions)
        trajectory = []
        best_policy, best_value = policy, -np.inf

        for t in range(self.T + 1):
            value, worst = pessimistic_value(version_space, self.mdp, policy)
            trajectory.append((t, value, worst))
            if value > best_value:
                best_policy, best_value = policy, value
            if t == self.T:
                break
            worst_mdp = self.mdp.with_transition(models[label_position[worst]])
            policy = npg_step(policy, evaluate_policy(worst_mdp, policy), self.eta, self.mode)

        if self.polish:
            best_policy, best_value = self._polish(version_space, best_policy, best_value)
        value, worst = pessimistic_value(version_space, self.mdp, best_policy)
        self.logger.debug(f"CPPO finished: pessimistic value {value:.6f} after {self.T} iterations")
        return CppoResult(best_policy, value, worst, self.T, trajectory)

    def _polish(self, version_space, policy: TimePolicy, value: float) -> Tuple[TimePolicy, float]:
        """Accept a deterministic policy only when it strictly raises the pessimistic value"""
        H, S, A = self.mdp.horizon, self.mdp.num_states, self.mdp.num_actions
        models, _ = _members(version_space)
        starts = [policy.action_probs.argmax(axis=2)]
        starts += [plan_optimal(self.mdp.with_transition(model))[0].action_probs.argmax(axis=2) for model in models]
        scored = [(pessimistic_value(version_space, self.mdp, TimePolicy.deterministic(start, A))[0], i)
                  for i, start in enumerate(starts)]
        current, start_index = max(scored, key=lambda item: (item[0], -item[1]))
        actions = starts[start_index]
        for _ in range(MAX_POLISH_PASSES):
            improved = False
            for h in range(H):
                for s in range(S):
                    for a in range(A):
                        if a == actions[h, s]:
                            continue
                        trial = actions.copy()
                        trial[h, s] = a
                        trial_value = pessimistic_value(version_space, self.mdp,
                                                        TimePolicy.deterministic(trial, A))[0]
                        if trial_value > current + IMPROVEMENT_TOL:
                            actions, current, improved = trial, trial_value, True
            if not improved:
                break
        if current > value + IMPROVEMENT_TOL:
            return TimePolicy.deterministic(actions, A), current
        return policy, value


def cppo_optimize(version_space: Union[VersionSpace, np.ndarray], mdp: TabularMDP, T: int, eta: float,
                  mode: str = "per_step", polish: bool = True) -> CppoResult:
    return CppoOptimizer(mdp, T, eta, mode, polish).optimize(version_space)


def cppo_pipeline(model_class: FiniteModelClass, dataset: OfflineDataset, threshold: ThresholdPolicy,
                  mdp: TabularMDP, T: int, eta: float, xi: Optional[float] = None,
                  mode: str = "per_step") -> CppoResult:
    """MLE -> version space -> max-min; truth capture is recorded for diagnostics only."""
    mle = mle_finite(model_class, dataset)
    version_space = build_version_space(model_class, mle, dataset, threshold, xi)
    result = cppo_optimize(version_space, mdp, T, eta, mode)
    result.diagnostics.update({
        "xi": version_space.xi,
        "mle_index": mle,
        "version_space_size": version_space.size,
        "truth_in_space": version_space.contains_truth,
    })
    if not version_space.contains_truth:
        logger.warning(f"⚠️ Truth outside the version space (xi={version_space.xi:.4g}, n={dataset.n})")
    return result


def naive_certainty_equivalent(model_class: FiniteModelClass, dataset: OfflineDataset,
                               mdp: TabularMDP) -> TimePolicy:
    """Optimal policy of the MLE model, no pessimism"""
    mle = mle_finite(model_class, dataset)
    policy, _ = plan_optimal(mdp.with_transition(model_class.models[mle]))
    return policy


def brute_force_maxmin(version_space: Union[VersionSpace, np.ndarray], mdp: TabularMDP) -> Tuple[TimePolicy, float]:
    """Exact max-min over all deterministic time-indexed policies; first in enumeration order on ties"""
    best_policy, best_value = None, -np.inf
    for policy in enumerate_deterministic_policies(mdp.horizon, mdp.num_states, mdp.num_actions):
        value, _ = pessimistic_value(version_space, mdp, policy)
        if value > best_value:
            best_policy, best_value = policy, value
    return best_policy, float(best_value)


@dataclass(frozen=True)
class PessimismDecomposition:
    """gap = V*(pi*) - V*(pi_hat) split into estimation, optimization and pessimism terms."""

    gap: float
    estimation_term: float  # V*(pi*) - min_P V_P(pi*)
    optimization_term: float  # min_P V_P(pi*) - min_P V_P(pi_hat)
    pessimism_term: float  # min_P V_P(pi_hat) - V*(pi_hat), <= 0 when P* is captured

    @property
    def holds(self) -> bool:
        """gap <= estimation term, up to the optimizer's shortfall on the comparator"""
        return self.gap <= self.estimation_term + max(self.optimization_term, 0.0) + 1e-9


def pessimism_decomposition(result: CppoResult, comparator: TimePolicy, mdp_true: TabularMDP,
                            version_space: Union[VersionSpace, np.ndarray]) -> PessimismDecomposition:
    comparator_true = policy_value(mdp_true, comparator)
    learned_true = policy_value(mdp_true, result.policy)
    comparator_lcb, _ = pessimistic_value(version_space, mdp_true, comparator)
    learned_lcb, _ = pessimistic_value(version_space, mdp_true, result.policy)
    return PessimismDecomposition(
        gap=comparator_true - learned_true,
        estimation_term=comparator_true - comparator_lcb,
        optimization_term=comparator_lcb - learned_lcb,
        pessimism_term=learned_lcb - learned_true,
    )
