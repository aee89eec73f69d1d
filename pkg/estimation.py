#!/usr/bin/env python3
"""
Model estimation and version spaces
Features:
- Maximum likelihood for finite classes, empirical tabular MLE and ridge MLE for KNRs
- Threshold rules for the version-space radius (finite, tabular, KNR, low-rank)
- Version spaces over finite classes and KNR confidence balls
- Empirical threshold calibration and MLE-rate verification over repeated draws
- Reference suboptimality-gap bounds used by the experiment reports
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg

from exceptions import (
    CalibrationError,
    DimensionMismatchError,
    EmptyDatasetError,
    InconsistentClassError,
    InvalidParameterError,
)
from mdp_core import TabularMDP, weighted_l1sq
from model_zoo import FiniteModelClass, KNRModel, LowRankModelClass
from offline_data import (
    KNRDataset,
    OfflineDataset,
    OfflineDistribution,
    empirical_l1sq,
    pair_frequencies,
    sample_dataset,
    transition_counts,
)
from trial_pool import map_trials

logger = logging.getLogger(__name__)

SPECTRAL_RTOL = 1e-10
MIN_MULTIPLIER = 1e-12


class ThresholdPolicy(BaseModel):
    """Radius rule for the version space; c1 doubles as the calibrated multiplier."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)

    rule: Literal["finite", "tabular", "knr", "lowrank"] = "finite"
    c1: float = Field(default=2.0, gt=0)
    c2: float = Field(default=math.e, gt=0)
    delta: float = Field(default=0.1, gt=0, lt=1)
    lam: float = Field(default=1.0, gt=0, alias="lambda")

    def with_multiplier(self, multiplier: float) -> "ThresholdPolicy":
        return self.model_copy(update={"c1": multiplier})

    def xi(self, n: int, *, class_size: Optional[int] = None, num_states: Optional[int] = None,
           num_actions: Optional[int] = None, num_phi: Optional[int] = None, num_mu: Optional[int] = None,
           weight_norm: Optional[float] = None, noise_sigma: Optional[float] = None,
           state_dim: Optional[int] = None, sigma_n: Optional[np.ndarray] = None) -> float:
        if n < 1:
            raise InvalidParameterError("n", n, ">= 1")
        if self.rule == "finite":
            _require(class_size=class_size)
            return self.c1 * math.log(self.c2 * class_size / self.delta) / n
        if self.rule == "tabular":
            _require(num_states=num_states, num_actions=num_actions)
            pairs = num_states * num_actions
            return self.c1 * num_states * pairs * math.log(n * pairs * self.c2 / self.delta) / n
        if self.rule == "lowrank":
            _require(num_phi=num_phi, num_mu=num_mu)
            return self.c1 * math.log(num_phi * num_mu / self.delta) / n
        _require(weight_norm=weight_norm, noise_sigma=noise_sigma, state_dim=state_dim, sigma_n=sigma_n)
        gain = information_gain(sigma_n, self.lam)
        radius_sq = 2 * self.lam * weight_norm ** 2 + 8 * noise_sigma ** 2 * (
            state_dim * math.log(5) + math.log(1 / self.delta) + gain)
        return math.sqrt(radius_sq)


def _require(**values: Any) -> None:
    for name, value in values.items():
        if value is None:
            raise InvalidParameterError(name, None, "given for this threshold rule")


def information_gain(sigma_n: np.ndarray, lam: float) -> float:
    """ln det(Sigma_n + lam I) - ln det(lam I)"""
    d = sigma_n.shape[0]
    sign, logdet = np.linalg.slogdet(sigma_n + lam * np.eye(d))
    return float(logdet - d * math.log(lam))


# Maximum likelihood


def class_log_likelihoods(models: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Total log-likelihood per member; -inf for any zero-probability observed transition"""
    observed = counts > 0
    with np.errstate(divide="ignore"):
        logs = np.log(models)
    terms = np.where(observed, counts * np.where(observed, logs, 0.0), 0.0)
    totals = terms.reshape(models.shape[0], -1).sum(axis=1)
    impossible = ((models == 0) & observed).reshape(models.shape[0], -1).any(axis=1)
    totals[impossible] = -np.inf
    return totals


def mle_finite(model_class: FiniteModelClass, dataset: OfflineDataset) -> int:
    """argmax of the average log-likelihood; lowest index on ties."""
    if dataset.n == 0:
        raise EmptyDatasetError("MLE needs at least one transition")
    scores = class_log_likelihoods(model_class.models, transition_counts(dataset)) / dataset.n
    if np.all(scores == -np.inf):
        raise InconsistentClassError("Every class member assigns zero probability to an observed transition")
    return int(np.argmax(scores))


def mle_tabular(dataset: OfflineDataset, num_states: int, num_actions: int) -> np.ndarray:
    """Empirical transition frequencies; unvisited (s, a) rows are uniform"""
    if (dataset.num_states, dataset.num_actions) != (num_states, num_actions):
        raise DimensionMismatchError("num_states", (num_states, num_actions),
                                     (dataset.num_states, dataset.num_actions))
    counts = transition_counts(dataset)
    totals = counts.sum(axis=2, keepdims=True)
    uniform = np.full_like(counts, 1.0 / num_states)
    return np.where(totals > 0, counts / np.maximum(totals, 1.0), uniform)


def ridge_mle_knr(dataset: KNRDataset, feature: Any, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """W_hat = (sum s' phi^T)(Sigma_n + lam I)^{-1}; Sigma_n is returned without the ridge."""
    if not lam > 0:
        raise InvalidParameterError("lambda", lam, "> 0")
    if dataset.n == 0:
        raise EmptyDatasetError("Ridge MLE needs at least one transition")
    phi = feature(dataset.states, dataset.actions)
    sigma_n = phi.T @ phi
    regularized = sigma_n + lam * np.eye(phi.shape[1])
    W_hat = linalg.solve(regularized, phi.T @ dataset.next_states, assume_a="pos").T
    return W_hat, sigma_n


# Version spaces


@dataclass(frozen=True, eq=False)
class VersionSpace:
    """Members of a finite class within empirical squared-l1 distance xi of the MLE."""

    member_indices: Tuple[int, ...]
    xi: float
    mle_index: int
    distances: np.ndarray  # per class member, to the MLE
    model_class: FiniteModelClass

    @property
    def size(self) -> int:
        return len(self.member_indices)

    @property
    def models(self) -> np.ndarray:
        return self.model_class.models[list(self.member_indices)]

    @property
    def contains_truth(self) -> bool:
        return self.model_class.truth_index in self.member_indices

    def members_at(self, xi: float) -> Tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.distances <= xi))


@dataclass(frozen=True, eq=False)
class KNRFamily:
    """What the learner knows about a KNR: feature map, noise level and a norm bound on W*."""

    feature: Any
    state_dim: int
    noise_sigma: float
    weight_norm: float

    @classmethod
    def from_model(cls, model: KNRModel, weight_norm: Optional[float] = None) -> "KNRFamily":
        bound = float(np.linalg.norm(model.W, 2)) if weight_norm is None else weight_norm
        return cls(model.feature, model.state_dim, model.noise_sigma, bound)


@dataclass(frozen=True, eq=False)
class KNRConfidenceBall:
    """{W : ||(W_hat - W) Sigma_n^{1/2}||_2 <= xi}"""

    W_hat: np.ndarray
    sigma_n: np.ndarray
    lam: float
    xi: float

    def distance(self, W: np.ndarray) -> float:
        return float(np.linalg.norm((self.W_hat - W) @ _psd_power(self.sigma_n, 0.5), 2))

    def contains(self, W: np.ndarray) -> bool:
        return self.distance(W) <= self.xi * (1 + SPECTRAL_RTOL)

    def sample_boundary(self, rng: np.random.Generator, count: int) -> List[np.ndarray]:
        """Points at distance exactly xi from W_hat.

        Directions are shaped by (Sigma_n + lam I)^{-1/2} so unexplored feature directions stay finite,
        then rescaled to the ball radius. With Sigma_n = 0 every direction is unconstrained and the
        draws stay at radius xi in the (lam I) norm.
        """
        inverse_root = _psd_power(self.sigma_n + self.lam * np.eye(self.sigma_n.shape[0]), -0.5)
        samples = []
        for _ in range(count):
            offset = rng.standard_normal(self.W_hat.shape) @ inverse_root
            distance = self.distance(self.W_hat + offset)
            if distance > 0:
                offset *= self.xi / distance
            else:
                offset *= self.xi / (math.sqrt(self.lam) * np.linalg.norm(offset, 2))
            samples.append(self.W_hat + offset)
        return samples


def _psd_power(matrix: np.ndarray, power: float) -> np.ndarray:
    eigenvalues, vectors = linalg.eigh(matrix)
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    if power < 0:
        eigenvalues = np.where(eigenvalues > 0, eigenvalues, np.inf)
    return (vectors * eigenvalues ** power) @ vectors.T


def rule_value(policy: ThresholdPolicy, model_class: Union[FiniteModelClass, LowRankModelClass], n: int) -> float:
    """xi for a finite or low-rank class at sample size n"""
    if policy.rule == "lowrank":
        if not isinstance(model_class, LowRankModelClass):
            raise InvalidParameterError("rule", policy.rule, "a low-rank class")
        return policy.xi(n, num_phi=model_class.phi_set.shape[0], num_mu=model_class.mu_set.shape[0])
    num_states, num_actions = model_class.models.shape[1:3]
    return policy.xi(n, class_size=model_class.size, num_states=num_states, num_actions=num_actions)


def threshold_for(model_class: Union[FiniteModelClass, LowRankModelClass], dataset: OfflineDataset,
                  policy: ThresholdPolicy) -> float:
    return rule_value(policy, model_class, dataset.n)


def build_version_space(model_class: Union[FiniteModelClass, LowRankModelClass, KNRFamily],
                        mle: Union[int, Tuple[np.ndarray, np.ndarray]],
                        dataset: Union[OfflineDataset, KNRDataset], policy: ThresholdPolicy,
                        xi: Optional[float] = None) -> Union[VersionSpace, KNRConfidenceBall]:
    """Version space around the MLE; xi defaults to the policy's rule."""
    if isinstance(model_class, KNRFamily):
        W_hat, sigma_n = mle
        if xi is None:
            knr_rule = policy.model_copy(update={"rule": "knr"})
            xi = knr_rule.xi(dataset.n, weight_norm=model_class.weight_norm, noise_sigma=model_class.noise_sigma,
                             state_dim=model_class.state_dim, sigma_n=sigma_n)
        return KNRConfidenceBall(W_hat, sigma_n, policy.lam, xi)

    if xi is None:
        xi = threshold_for(model_class, dataset, policy)
    finite = model_class.as_finite_class() if isinstance(model_class, LowRankModelClass) else model_class
    weights = pair_frequencies(dataset)
    anchor = finite.models[mle]
    distances = np.array([weighted_l1sq(weights, member, anchor) for member in finite.models])
    members = tuple(int(i) for i in np.flatnonzero(distances <= xi))
    logger.debug(f"Version space: {len(members)}/{finite.size} members at xi={xi:.4g}")
    return VersionSpace(members, float(xi), int(mle), distances, finite)


def sample_tabular_version_space(dataset: OfflineDataset, mle_table: np.ndarray, xi: float,
                                 num_candidates: int, concentration: float = 1.0,
                                 seed: Optional[int] = None) -> FiniteModelClass:
    """Finite stand-in for the tabular version space: the MLE plus Dirichlet candidates passing the xi test.

    Candidate rows are drawn from Dirichlet(counts + concentration); unvisited rows are unconstrained
    by the data, so they range over the whole simplex.
    """
    rng = np.random.default_rng(seed)
    counts = transition_counts(dataset)
    kept = [np.asarray(mle_table, dtype=float)]
    for _ in range(num_candidates):
        draws = rng.gamma(counts + concentration)
        candidate = draws / draws.sum(axis=2, keepdims=True)
        if empirical_l1sq(dataset, candidate, mle_table) <= xi:
            kept.append(candidate)
    logger.info(f"🎯 Tabular version space: kept {len(kept) - 1}/{num_candidates} sampled candidates")
    return FiniteModelClass(np.stack(kept), 0)


# Calibration and verification


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    multiplier: float
    coverage: float
    ratios: np.ndarray  # per trial: distance(P*, MLE) / rule value at c1 = 1
    policy: ThresholdPolicy

    def coverage_at(self, multiplier: float) -> float:
        return float(np.mean(self.ratios <= multiplier))


def truth_distances(model_class: Union[FiniteModelClass, LowRankModelClass], mdp_true: TabularMDP,
                    rho: OfflineDistribution, n: int, trials: int, seed: Optional[int], threads: Optional[int] = None) -> np.ndarray:
    """Empirical squared-l1 distance between P* and the MLE, one value per independent dataset"""

    def trial(index: int, trial_seed: int) -> float:
        dataset = sample_dataset(mdp_true, rho, n, trial_seed)
        mle = mle_finite(model_class, dataset)
        return empirical_l1sq(dataset, model_class.truth, model_class.models[mle])

    return np.array(map_trials(trial, trials, seed, threads))


def calibrate_threshold(model_class: Union[FiniteModelClass, LowRankModelClass], mdp_true: TabularMDP,
                        rho: OfflineDistribution, n: int, delta: float, trials: int, seed: Optional[int] = None,
                        policy: Optional[ThresholdPolicy] = None, max_multiplier: float = 1e6,
                        threads: Optional[int] = None) -> CalibrationResult:
    """Smallest c1 for which P* lands in the version space in at least 1 - delta of the trials"""
    if trials < 100:
        raise InvalidParameterError("trials", trials, ">= 100")
    policy = (policy or ThresholdPolicy()).model_copy(update={"delta": delta})
    unit = policy.with_multiplier(1.0)
    base = rule_value(unit, model_class, n)
    ratios = truth_distances(model_class, mdp_true, rho, n, trials, seed, threads) / base

    needed = math.ceil((1 - delta) * trials)
    multiplier = max(float(np.sort(ratios)[needed - 1]), MIN_MULTIPLIER)
    if multiplier > max_multiplier:
        raise CalibrationError(f"Coverage {1 - delta:.3f} unattainable below multiplier {max_multiplier:g}",
                               float(np.mean(ratios <= max_multiplier)))
    result = CalibrationResult(multiplier, float(np.mean(ratios <= multiplier)), ratios,
                               policy.with_multiplier(multiplier))
    logger.info(f"📏 Calibrated multiplier {multiplier:.4g} (coverage {result.coverage:.3f}, n={n})")
    return result


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of log y against log x over strictly positive points; nan if fewer than two"""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0)
    if keep.sum() < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)
    return float(slope)


@dataclass
class MleGuaranteeReport:
    n_grid: List[int]
    errors: np.ndarray  # (len(n_grid), trials) of E_rho ||P_mle - P*||_1^2
    quantile_level: float
    multiplier: float
    slope: float
    bounded: List[bool] = field(default_factory=list)

    @property
    def medians(self) -> np.ndarray:
        return np.median(self.errors, axis=1)

    @property
    def quantiles(self) -> np.ndarray:
        return np.quantile(self.errors, self.quantile_level, axis=1)

    @property
    def decays(self) -> bool:
        return bool(np.all(self.medians == 0)) or self.slope <= -0.8

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {"n": n, "trial": t, "quantity": "mle_error", "value": float(self.errors[i, t])}
            for i, n in enumerate(self.n_grid) for t in range(self.errors.shape[1])
        ]


def verify_mle_guarantee(model_class: FiniteModelClass, mdp_true: TabularMDP, rho: OfflineDistribution,
                         n_grid: Sequence[int], trials: int, delta: float = 0.1, seed: Optional[int] = None,
                         threads: Optional[int] = None) -> MleGuaranteeReport:
    """Population error of the MLE across n; the rate multiplier is fitted on the smallest n."""

    def trial_errors(n: int, n_seed: int) -> np.ndarray:
        def trial(index: int, trial_seed: int) -> float:
            dataset = sample_dataset(mdp_true, rho, n, trial_seed)
            estimate = model_class.models[mle_finite(model_class, dataset)]
            return weighted_l1sq(rho.table, estimate, model_class.truth)

        return np.array(map_trials(trial, trials, n_seed, threads))

    n_grid = [int(n) for n in n_grid]
    errors = np.stack([trial_errors(n, None if seed is None else seed + i) for i, n in enumerate(n_grid)])
    rates = np.array([math.log(model_class.size / delta) / n for n in n_grid])
    quantiles = np.quantile(errors, 1 - delta, axis=1)
    multiplier = float(quantiles[0] / rates[0])
    bounded = [bool(q <= multiplier * rate * (1 + 1e-12)) for q, rate in zip(quantiles, rates)]
    slope = loglog_slope(n_grid, np.median(errors, axis=1))
    report = MleGuaranteeReport(n_grid, errors, 1 - delta, multiplier, slope, bounded)
    logger.info(f"📉 MLE error slope {slope:.3f} over n={n_grid}")
    return report


# Reference gap bounds (unit constants unless given)


def cppo_gap_bound(horizon: int, c_dagger: float, class_size: int, n: int, delta: float,
                   c2: float = math.e, c3: float = 1.0) -> float:
    return c3 * horizon ** 2 * math.sqrt(c_dagger * math.log(c2 * class_size / delta) / n)


def tabular_gap_bound(horizon: int, concentrability: float, num_states: int, num_actions: int, n: int,
                      delta: float, c3: float = 1.0, c4: float = math.e) -> float:
    pairs = num_states * num_actions
    return c3 * horizon ** 2 * math.sqrt(
        concentrability * num_states * pairs * math.log(n * pairs * c4 / delta) / n)


def knr_gap_bound(horizon: int, rel_cond_number: float, rank_sigma_rho: int, feature_dim: int, state_dim: int,
                  n: int, delta: float, c1: float = 1.0, c2: float = math.e) -> float:
    r_bar = rank_sigma_rho * (rank_sigma_rho + math.log(c2 / delta))
    return c1 * horizon ** 2 * min(math.sqrt(feature_dim), r_bar) * math.sqrt(r_bar) * math.sqrt(
        state_dim * rel_cond_number * math.log(1 + n) / n)


def lowrank_gap_bound(horizon: int, xi: float, num_actions: int, c_d0: float, rel_cond_number: float,
                      rank_sigma_rho: int, min_pib: float) -> float:
    return math.sqrt(xi) * math.sqrt(num_actions) * (
        horizon * math.sqrt(c_d0) + horizon ** 2 * math.sqrt(rel_cond_number * rank_sigma_rho / min_pib))


def pspo_gap_bound(horizon: int, coverage: float, complexity: float, n: int, num_actions: int, T: int,
                   c1: float = 1.0) -> float:
    """c1 H^2 sqrt(coverage * complexity / n) + H^2 sqrt(ln|A| / T); complexity is e.g. ln(|M| n)"""
    statistical = c1 * horizon ** 2 * math.sqrt(coverage * complexity / n)
    if T < 1:
        return math.inf
    return statistical + horizon ** 2 * math.sqrt(math.log(num_actions) / T)
