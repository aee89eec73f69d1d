#!/usr/bin/env python3
"""
Posterior-sampling policy optimization
Features:
- Conjugate beliefs over models: discrete weights, per-pair Dirichlet, matrix-normal (KNR)
- Exact posterior updates and fresh posterior draws
- NPG policy updates against a freshly sampled model each iteration
- Bayesian suboptimality-gap estimation over prior draws, with its LCB decomposition
- Exchangeability check for the version-space lower confidence bound
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from coverage import concentrability, refined_concentrability
from cppo import pessimistic_value
from estimation import ThresholdPolicy, VersionSpace, build_version_space, class_log_likelihoods, mle_finite
from exceptions import DimensionMismatchError, InconsistentClassError, InvalidModelError, InvalidParameterError
from mdp_core import TabularMDP, TimePolicy, _frozen, evaluate_policy, npg_step, plan_optimal, policy_value
from model_zoo import FiniteModelClass
from offline_data import KNRDataset, OfflineDataset, OfflineDistribution, sample_dataset, transition_counts
from trial_pool import map_trials

logger = logging.getLogger(__name__)

ADVANTAGE_TOL = 1e-9


@dataclass(frozen=True)
class PosteriorDraw:
    model: np.ndarray  # transition table, or W for matrix-normal beliefs
    model_id: Optional[int] = None  # class index for discrete beliefs


@dataclass(frozen=True, eq=False)
class DiscretePrior:
    """Weights over the members of a finite class"""

    model_class: FiniteModelClass
    weights: np.ndarray
    observations: int = 0

    def __post_init__(self):
        weights = _frozen(self.weights)
        if weights.shape != (self.model_class.size,):
            raise DimensionMismatchError("class_size", self.model_class.size, weights.shape)
        if not np.all(weights >= 0) or abs(weights.sum() - 1) > 1e-12:
            raise InvalidModelError("Discrete prior weights must be a distribution")
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, model_class: FiniteModelClass) -> "DiscretePrior":
        return cls(model_class, np.full(model_class.size, 1.0 / model_class.size))

    @classmethod
    def point_mass(cls, model_class: FiniteModelClass, index: int) -> "DiscretePrior":
        return cls(model_class, np.eye(model_class.size)[index])

    def sample(self, rng: np.random.Generator) -> PosteriorDraw:
        index = int(rng.choice(self.model_class.size, p=self.weights))
        return PosteriorDraw(self.model_class.models[index], index)


@dataclass(frozen=True, eq=False)
class DirichletPrior:
    """Independent Dirichlet(alpha(s, a)) over every transition row"""

    alpha: np.ndarray  # (S, A, S)
    observations: int = 0

    def __post_init__(self):
        alpha = _frozen(self.alpha)
        if alpha.ndim != 3 or alpha.shape[0] != alpha.shape[2]:
            raise DimensionMismatchError("alpha", "(S, A, S)", alpha.shape)
        if not np.all(alpha > 0):
            raise InvalidModelError("Dirichlet concentrations must be strictly positive")
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def symmetric(cls, num_states: int, num_actions: int, concentration: float = 1.0) -> "DirichletPrior":
        return cls(np.full((num_states, num_actions, num_states), concentration))

    @property
    def mean(self) -> np.ndarray:
        return self.alpha / self.alpha.sum(axis=2, keepdims=True)

    def sample(self, rng: np.random.Generator) -> PosteriorDraw:
        draws = rng.gamma(self.alpha)
        totals = draws.sum(axis=2)
        for s, a in np.argwhere(totals == 0):
            draws[s, a] = rng.dirichlet(self.alpha[s, a])
        return PosteriorDraw(draws / draws.sum(axis=2, keepdims=True))


@dataclass(frozen=True, eq=False)
class MatrixNormalPrior:
    """W has rows ~ N(mean_row, zeta^2 precision^{-1}); the prior precision is lam I."""

    mean: np.ndarray  # (d_S, d)
    precision: np.ndarray  # (d, d)
    noise_sigma: float
    feature: Any
    observations: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "precision", _frozen(self.precision))
        if not self.noise_sigma > 0:
            raise InvalidParameterError("noise_sigma", self.noise_sigma, "> 0")
        if self.precision.shape != (self.mean.shape[1], self.mean.shape[1]):
            raise DimensionMismatchError("feature_dim", self.mean.shape[1], self.precision.shape)

    @classmethod
    def isotropic(cls, state_dim: int, feature: Any, lam: float, noise_sigma: float) -> "MatrixNormalPrior":
        if not lam > 0:
            raise InvalidParameterError("lambda", lam, "> 0")
        return cls(np.zeros((state_dim, feature.dim)), lam * np.eye(feature.dim), noise_sigma, feature)

    def sample(self, rng: np.random.Generator) -> PosteriorDraw:
        lower = linalg.cholesky(self.precision, lower=True)
        noise = rng.standard_normal(self.mean.shape)
        offset = linalg.solve_triangular(lower.T, noise.T, lower=False).T
        return PosteriorDraw(self.mean + self.noise_sigma * offset)


ModelPrior = Union[DiscretePrior, DirichletPrior, MatrixNormalPrior]
ModelPosterior = ModelPrior


def posterior_update(prior: ModelPrior, dataset: Union[OfflineDataset, KNRDataset]) -> ModelPosterior:
    """Exact conjugate update; an empty dataset returns the prior itself."""
    if dataset.n == 0:
        return prior
    observations = prior.observations + dataset.n

    if isinstance(prior, DiscretePrior):
        with np.errstate(divide="ignore"):
            log_weights = np.log(prior.weights)
        log_weights = log_weights + class_log_likelihoods(prior.model_class.models, transition_counts(dataset))
        if np.all(log_weights == -np.inf):
            raise InconsistentClassError("Every member with prior mass has zero likelihood on the data")
        weights = np.exp(log_weights - logsumexp(log_weights))
        return DiscretePrior(prior.model_class, weights / weights.sum(), observations)

    if isinstance(prior, DirichletPrior):
        return DirichletPrior(prior.alpha + transition_counts(dataset), observations)

    phi = prior.feature(dataset.states, dataset.actions)
    precision = prior.precision + phi.T @ phi
    moment = prior.mean @ prior.precision + dataset.next_states.T @ phi
    mean = linalg.solve(precision, moment.T, assume_a="pos").T
    return replace(prior, mean=mean, precision=precision, observations=observations)


def posterior_sample(posterior: ModelPosterior, seed: Union[None, int, np.random.Generator] = None) -> PosteriorDraw:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return posterior.sample(rng)


@dataclass
class PspoResult:
    final_policy: TimePolicy
    policies: List[TimePolicy]
    sampled_model_ids: List[Optional[int]]
    eta: float
    T: int
    values_under_truth: Optional[List[float]] = None

    @property
    def best_iterate(self) -> int:
        """Index of the iterate with the highest true value; harness-side only"""
        if self.values_under_truth is None:
            raise InvalidParameterError("values_under_truth", None, "computed against a known truth")
        return int(np.argmax(self.values_under_truth))

    def rows(self) -> List[Dict[str, Any]]:
        values = self.values_under_truth or [float("nan")] * len(self.policies)
        rows = []
        for t, value in enumerate(values):
            model_id = self.sampled_model_ids[t - 1] if t > 0 else None
            rows.append({"iteration": t, "sampled_model_id": "" if model_id is None else model_id,
                         "value_under_truth": value})
        return rows


class PosteriorSamplingOptimizer:
    """Fixed posterior, one fresh model draw per iteration, NPG step on that draw's advantage."""

    def __init__(self, mdp: TabularMDP, T: int, eta: float, mode: str = "per_step"):
        if T < 0:
            raise InvalidParameterError("T", T, ">= 0")
        bound = 1 / (2 * mdp.horizon)
        if not 0 < eta < bound:
            raise InvalidParameterError("eta", eta, f"in (0, 1/(2H)) = (0, {bound:.6g})")
        self.mdp = mdp
        self.T = T
        self.eta = eta
        self.mode = mode
        self.logger = logging.getLogger(__name__)

    def run(self, posterior: ModelPosterior, seed: Optional[int] = None,
            truth: Optional[TabularMDP] = None) -> PspoResult:
        if isinstance(posterior, MatrixNormalPrior):
            raise InvalidParameterError("posterior", "matrix-normal", "a tabular belief (use knr_planning)")
        rng = np.random.default_rng(seed)
        policy = TimePolicy.uniform(self.mdp.horizon, self.mdp.num_states, self.mdp.num_actions)
        policies, model_ids = [policy], []
        for _ in range(self.T):
            draw = posterior.sample(rng)
            triple = evaluate_policy(self.mdp.with_transition(draw.model), policy)
            assert np.abs(triple.advantages).max() <= self.mdp.horizon + ADVANTAGE_TOL
            policy = npg_step(policy, triple, self.eta, self.mode)
            policies.append(policy)
            model_ids.append(draw.model_id)
        values = [policy_value(truth, p) for p in policies] if truth is not None else None
        return PspoResult(policy, policies, model_ids, self.eta, self.T, values)


def pspo_run(posterior: ModelPosterior, mdp: TabularMDP, T: int, eta: float, seed: Optional[int] = None,
             truth: Optional[TabularMDP] = None, mode: str = "per_step") -> PspoResult:
    return PosteriorSamplingOptimizer(mdp, T, eta, mode).run(posterior, seed, truth)


def posterior_sampling_plan(posterior: ModelPosterior, mdp: TabularMDP,
                            seed: Optional[int] = None) -> TimePolicy:
    """Warm-up variant: one posterior draw, then its optimal policy"""
    draw = posterior_sample(posterior, seed)
    policy, _ = plan_optimal(mdp.with_transition(draw.model))
    return policy


def lcb_gap_term(version_space: Union[VersionSpace, np.ndarray], comparator: TimePolicy,
                 mdp_true: TabularMDP) -> float:
    """V^{pi*}_{P*} minus the version-space lower bound at pi*"""
    lower, _ = pessimistic_value(version_space, mdp_true, comparator)
    return policy_value(mdp_true, comparator) - lower


@dataclass
class BayesianGapReport:
    n: int
    T: int
    gaps: np.ndarray  # per outer trial: V^{pi(P*)}_{P*} - max_t V^{pi_t}_{P*}
    final_gaps: np.ndarray  # same, for the last iterate
    lcb_terms: Optional[np.ndarray]  # version-space LCB term, discrete priors only
    coverage: Dict[str, Tuple[float, float]] = field(default_factory=dict)  # name -> (mean, stderr)

    @property
    def mean_gap(self) -> float:
        return float(self.gaps.mean())

    @property
    def stderr(self) -> float:
        return float(self.gaps.std(ddof=1) / math.sqrt(self.gaps.size)) if self.gaps.size > 1 else float("inf")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "T": self.T,
            "mean_gap": self.mean_gap,
            "stderr": self.stderr,
            "mean_final_gap": float(self.final_gaps.mean()),
            "mean_lcb_term": None if self.lcb_terms is None else float(self.lcb_terms.mean()),
            "coverage": {name: {"mean": m, "stderr": se} for name, (m, se) in self.coverage.items()},
        }


def _mean_stderr(values: Sequence[float]) -> Tuple[float, float]:
    values = np.asarray(values, dtype=float)
    if values.size < 2 or not np.all(np.isfinite(values)):
        return float(values.mean()), float("nan")
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def bayesian_gap_estimate(prior: ModelPrior, rho: OfflineDistribution, mdp: TabularMDP, n: int, T: int,
                          eta: float, num_outer_trials: int, seed: Optional[int] = None,
                          delta: Optional[float] = None, threads: Optional[int] = None) -> BayesianGapReport:
    """Outer loop over P* ~ prior: sample data, run PS-PO, measure the gap exactly by DP."""
    if num_outer_trials < 10:
        raise InvalidParameterError("num_outer_trials", num_outer_trials, ">= 10")
    lcb_delta = delta if delta is not None else min(1.0 / max(n, 2), 0.5)
    threshold = ThresholdPolicy(rule="finite", delta=lcb_delta)

    def trial(index: int, trial_seed: int) -> Dict[str, float]:
        rng = np.random.default_rng(trial_seed)
        truth_draw = prior.sample(rng)
        mdp_true = mdp.with_transition(truth_draw.model)
        comparator, optimal = plan_optimal(mdp_true)
        dataset = sample_dataset(mdp_true, rho, n, int(rng.integers(2 ** 63)))
        posterior = posterior_update(prior, dataset)
        result = pspo_run(posterior, mdp, T, eta, int(rng.integers(2 ** 63)), truth=mdp_true)
        outcome = {
            "gap": optimal - max(result.values_under_truth),
            "final_gap": optimal - result.values_under_truth[-1],
            "C": concentrability(comparator, mdp_true, rho),
        }
        if isinstance(prior, DiscretePrior) and n > 0:
            model_class = FiniteModelClass(prior.model_class.models, truth_draw.model_id)
            outcome["C_dagger"] = refined_concentrability(model_class, comparator, mdp_true, rho)
            version_space = build_version_space(model_class, mle_finite(model_class, dataset), dataset, threshold)
            outcome["lcb"] = lcb_gap_term(version_space, comparator, mdp_true)
        return outcome

    outcomes = map_trials(trial, num_outer_trials, seed, threads)
    coverage = {"C": _mean_stderr([o["C"] for o in outcomes])}
    lcb_terms = None
    if "C_dagger" in outcomes[0]:
        coverage["C_dagger"] = _mean_stderr([o["C_dagger"] for o in outcomes])
        lcb_terms = np.array([o["lcb"] for o in outcomes])
    report = BayesianGapReport(n, T, np.array([o["gap"] for o in outcomes]),
                               np.array([o["final_gap"] for o in outcomes]), lcb_terms, coverage)
    logger.info(f"🎲 Bayesian gap at n={n}, T={T}: {report.mean_gap:.4f} ± {report.stderr:.4f}")
    return report


@dataclass(frozen=True)
class ExchangeabilityReport:
    truth_side: float  # E[L(pi(P*); D) | D] with P* ~ posterior
    sample_side: float  # E[L(pi(P_t); D) | D] with an independent P_t ~ posterior
    stderr: float

    @property
    def agrees(self) -> bool:
        difference = abs(self.truth_side - self.sample_side)
        return difference <= 3 * self.stderr if self.stderr > 0 else difference <= 1e-12


def exchangeability_check(posterior: ModelPosterior, version_space: Union[VersionSpace, np.ndarray],
                          mdp: TabularMDP, num_draws: int, seed: Optional[int] = None) -> ExchangeabilityReport:
    """Both sides draw from the same posterior given D, so their LCB averages must match.

    The truth side stands in for P* given D: in the Bayesian setting the conditional law of P* given
    the data is the posterior itself, so each truth draw plays the role of the unknown P*. The sample
    side is an independent posterior draw P_t, as in one PS-PO iteration.
    """
    rng = np.random.default_rng(seed)
    cache: Dict[bytes, float] = {}

    def lcb_of_plan(model: np.ndarray) -> float:
        key = model.tobytes()
        if key not in cache:
            policy, _ = plan_optimal(mdp.with_transition(model))
            cache[key] = pessimistic_value(version_space, mdp, policy)[0]
        return cache[key]

    truth_side = np.array([lcb_of_plan(posterior.sample(rng).model) for _ in range(num_draws)])
    sample_side = np.array([lcb_of_plan(posterior.sample(rng).model) for _ in range(num_draws)])
    differences = truth_side - sample_side
    stderr = float(differences.std(ddof=1) / math.sqrt(num_draws)) if num_draws > 1 else 0.0
    return ExchangeabilityReport(float(truth_side.mean()), float(sample_side.mean()), stderr)
