#!/usr/bin/env python3
"""
Low-rank offline pathway
Features:
- Joint MLE over the valid (mu, phi) pairs of a finite low-rank class
- Stationary behaviour distributions for the offline data
- Gap diagnostics: realized CPPO gap next to the bound ingredients under the true feature
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy import linalg

from coverage import feature_second_moment, initial_dist_concentrability, numerical_rank, relative_condition_number
from cppo import cppo_optimize
from estimation import ThresholdPolicy, build_version_space, class_log_likelihoods, lowrank_gap_bound
from exceptions import InconsistentClassError, InvalidDistributionError, InvalidModelError
from mdp_core import TabularMDP, TimePolicy, occupancy, plan_optimal, policy_value
from model_zoo import LowRankModelClass, low_rank_product, make_low_rank_class
from offline_data import OfflineDataset, OfflineDistribution, stationarity_gap, transition_counts

logger = logging.getLogger(__name__)

NORMALIZER_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class LowRankFit:
    mu_index: int
    phi_index: int
    transition: np.ndarray
    log_likelihood: float  # average over records


def pair_normalizers(model_class: LowRankModelClass) -> np.ndarray:
    """sum_{s'} mu(s')^T phi(s, a) for every retained pair, shape (pairs, S, A)"""
    return np.stack([
        low_rank_product(model_class.mu_set[i_mu], model_class.phi_set[i_phi]).sum(axis=2)
        for i_mu, i_phi in model_class.pairs
    ])


def mle_low_rank(model_class: LowRankModelClass, dataset: OfflineDataset) -> LowRankFit:
    """Exhaustive scan over valid pairs; the finite-state normalizer term is a plain sum."""
    if not model_class.pairs:
        raise InconsistentClassError("Low-rank class has no valid (mu, phi) pair")
    normalizers = pair_normalizers(model_class)
    if np.abs(normalizers - 1).max() > NORMALIZER_TOL:
        logger.warning(f"⚠️ Low-rank normalizers deviate from 1 by {np.abs(normalizers - 1).max():.2e}")
    # stored models are already divided by their normalizers
    scores = class_log_likelihoods(model_class.models, transition_counts(dataset)) / max(dataset.n, 1)
    if np.all(scores == -np.inf):
        raise InconsistentClassError("Every (mu, phi) pair assigns zero probability to an observed transition")
    best = int(np.argmax(scores))
    mu_index, phi_index = model_class.pairs[best]
    return LowRankFit(mu_index, phi_index, model_class.models[best], float(scores[best]))


def stationary_behavior_offline(mdp: TabularMDP, behavior: np.ndarray) -> OfflineDistribution:
    """rho(s, a) = mu(s) pi_b(a|s) with mu stationary for the chain induced by pi_b"""
    probs = behavior.action_probs[0] if isinstance(behavior, TimePolicy) else np.asarray(behavior, dtype=float)
    chain = np.einsum("sa,sap->sp", probs, mdp.transition)
    S = mdp.num_states
    system = np.vstack([chain.T - np.eye(S), np.ones((1, S))])
    target = np.zeros(S + 1)
    target[-1] = 1.0
    stationary, *_ = linalg.lstsq(system, target)
    stationary = np.clip(stationary, 0.0, None)
    table = stationary[:, None] * probs
    table /= table.sum()
    gap = stationarity_gap(table, mdp.transition)
    policy = TimePolicy.stationary(probs, mdp.horizon)
    return OfflineDistribution(table, source="stationary_behavior", behavior=policy, stationarity_gap=gap)


@dataclass
class LowRankScenario:
    mdp: TabularMDP
    model_class: LowRankModelClass
    rho: OfflineDistribution
    comparator: TimePolicy


def make_low_rank_scenario(seed: Optional[int], num_states: int = 6, num_actions: int = 2, horizon: int = 4,
                           latent_dim: int = 3, num_phi: int = 3, num_mu: int = 3, num_signed_mu: int = 2,
                           phi_kind: str = "soft") -> LowRankScenario:
    """Reference low-rank instance: random rewards, full-support stationary behaviour, pi(P*) as comparator"""
    rng = np.random.default_rng(seed)
    model_class = make_low_rank_class(seed, num_states, num_actions, latent_dim, num_phi, num_mu,
                                      num_signed_mu, phi_kind)
    initial = rng.dirichlet(np.ones(num_states))
    mdp = TabularMDP(model_class.truth, rng.random((num_states, num_actions)), initial / initial.sum(), horizon)
    behavior = rng.dirichlet(np.full(num_actions, 2.0), size=num_states)
    rho = stationary_behavior_offline(mdp, behavior / behavior.sum(axis=1, keepdims=True))
    comparator, _ = plan_optimal(mdp)
    return LowRankScenario(mdp, model_class, rho, comparator)


@dataclass
class LowRankDiagnostics:
    gap: float
    xi: float
    rel_cond_number: float
    C_d0: float
    rank_sigma_rho: int
    min_pib: float
    rhs: float
    stationarity_gap: Optional[float]
    truth_in_space: bool
    fit: LowRankFit
    extras: Dict[str, Any] = field(default_factory=dict)

    @property
    def within_bound(self) -> bool:
        return self.gap <= self.rhs

    def to_dict(self) -> Dict[str, Any]:
        return {
            "gap": self.gap,
            "xi": self.xi,
            "rel_cond_number": self.rel_cond_number,
            "C_d0": self.C_d0,
            "rank_sigma_rho": self.rank_sigma_rho,
            "min_pib": self.min_pib,
            "rhs": self.rhs,
            "stationarity_gap": self.stationarity_gap,
            "truth_in_space": self.truth_in_space,
            "mu_index": self.fit.mu_index,
            "phi_index": self.fit.phi_index,
            **self.extras,
        }


def _check_behavior(rho: OfflineDistribution) -> float:
    if rho.behavior is None:
        raise InvalidDistributionError("Low-rank diagnostics need rho in behaviour form")
    probs = rho.behavior.action_probs[0]
    zeros = np.argwhere(probs <= 0)
    if zeros.size:
        s, a = (int(i) for i in zeros[0])
        raise InvalidModelError("Behaviour policy has a zero action probability", (s, a))
    if not rho.is_stationary:
        logger.warning(f"⚠️ rho is not stationary under the behaviour policy (gap {rho.stationarity_gap})")
    return rho.min_behavior_prob()


def lowrank_gap_diagnostics(model_class: LowRankModelClass, dataset: OfflineDataset, threshold: ThresholdPolicy,
                            comparator: TimePolicy, mdp_true: TabularMDP, rho: OfflineDistribution,
                            T: int = 200, eta: Optional[float] = None) -> LowRankDiagnostics:
    """Algorithm side sees only the class and the data; bound ingredients use the true feature phi*."""
    min_pib = _check_behavior(rho)
    eta = eta if eta is not None else 0.9 / (2 * mdp_true.horizon)

    fit = mle_low_rank(model_class, dataset)
    mle_index = model_class.pairs.index((fit.mu_index, fit.phi_index))
    version_space = build_version_space(model_class, mle_index, dataset, threshold)
    result = cppo_optimize(version_space, mdp_true, T, eta)
    gap = policy_value(mdp_true, comparator) - policy_value(mdp_true, result.policy)

    true_feature = model_class.true_feature
    rel_cond = relative_condition_number(true_feature, occupancy(mdp_true, comparator), rho)
    c_d0 = initial_dist_concentrability(model_class.as_finite_class(), mdp_true, rho)
    rank = numerical_rank(feature_second_moment(true_feature, rho))
    rhs = lowrank_gap_bound(mdp_true.horizon, version_space.xi, mdp_true.num_actions, c_d0, rel_cond, rank, min_pib)
    return LowRankDiagnostics(
        gap=gap,
        xi=version_space.xi,
        rel_cond_number=rel_cond,
        C_d0=c_d0,
        rank_sigma_rho=rank,
        min_pib=min_pib,
        rhs=rhs,
        stationarity_gap=rho.stationarity_gap,
        truth_in_space=version_space.contains_truth,
        fit=fit,
        extras={"version_space_size": version_space.size},
    )
