#!/usr/bin/env python3
"""
Model families and scenario generators
Features:
- Finite model classes built around a random ground truth (realizable by construction)
- Partial-coverage trap instances and the matching trap classes
- Low-rank classes as finite (mu, phi) grids with validity filtering
- Finite-dimensional KNR models, feature maps and desk-scale KNR scenarios
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from exceptions import ConfigError, DimensionMismatchError, InvalidModelError, InvalidParameterError
from mdp_core import TabularMDP, TimePolicy, _frozen, check_transition_table, evaluate_policy, plan_optimal
from offline_data import OfflineDistribution

logger = logging.getLogger(__name__)

FEATURE_NORM_TOL = 1e-12
LOW_RANK_TOL = 1e-9


def make_random_transition(rng: np.random.Generator, num_states: int, num_actions: int,
                           concentration: float = 1.0) -> np.ndarray:
    table = rng.dirichlet(np.full(num_states, concentration), size=(num_states, num_actions))
    return table / table.sum(axis=2, keepdims=True)


def make_random_mdp(seed: Optional[int], num_states: int, num_actions: int, horizon: int,
                    transition: Optional[np.ndarray] = None) -> TabularMDP:
    """Random rewards in [0, 1), Dirichlet initial distribution and (unless given) Dirichlet transitions."""
    rng = np.random.default_rng(seed)
    if transition is None:
        transition = make_random_transition(rng, num_states, num_actions)
    reward = rng.random((num_states, num_actions))
    initial = rng.dirichlet(np.ones(num_states))
    return TabularMDP(transition, reward, initial / initial.sum(), horizon)


@dataclass(frozen=True, eq=False)
class FiniteModelClass:
    """Finite hypothesis class M of transition tables with P* = models[truth_index]."""

    models: np.ndarray  # (M, S, A, S)
    truth_index: int

    def __post_init__(self):
        models = _frozen(self.models)
        if models.ndim != 4:
            raise DimensionMismatchError("models", "(M, S, A, S)", models.shape)
        for i, table in enumerate(models):
            try:
                check_transition_table(table)
            except InvalidModelError as e:
                raise InvalidModelError(f"Class member {i}: {e}", e.coordinates) from e
        if not 0 <= int(self.truth_index) < models.shape[0]:
            raise InvalidParameterError("truth_index", self.truth_index, f"in [0, {models.shape[0]})")
        object.__setattr__(self, "models", models)
        object.__setattr__(self, "truth_index", int(self.truth_index))

    @property
    def size(self) -> int:
        return self.models.shape[0]

    @property
    def num_states(self) -> int:
        return self.models.shape[1]

    @property
    def num_actions(self) -> int:
        return self.models.shape[2]

    @property
    def truth(self) -> np.ndarray:
        return self.models[self.truth_index]

    def subset(self, indices: Sequence[int]) -> "FiniteModelClass":
        """Sub-class keeping P*; the truth is prepended when missing from `indices`"""
        indices = list(indices)
        if self.truth_index not in indices:
            indices = [self.truth_index] + indices
        return FiniteModelClass(self.models[indices], indices.index(self.truth_index))

    def to_dict(self, mdp: TabularMDP) -> Dict[str, Any]:
        document = mdp.to_dict()
        document["class"] = self.models.tolist()
        document["truth_index"] = self.truth_index
        return document

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> Tuple[TabularMDP, "FiniteModelClass"]:
        model_class = cls(np.asarray(data["class"], dtype=float), int(data["truth_index"]))
        return TabularMDP.from_dict(data), model_class


def make_finite_class(seed: Optional[int], num_states: int, num_actions: int, class_size: int,
                      perturbation: float) -> FiniteModelClass:
    """P* is a random table; the other members are P* plus uniform noise of size `perturbation`, renormalized."""
    if class_size < 1:
        raise InvalidParameterError("class_size", class_size, ">= 1")
    if not 0 < perturbation <= 1:
        raise InvalidParameterError("perturbation", perturbation, "in (0, 1]")
    rng = np.random.default_rng(seed)
    truth = make_random_transition(rng, num_states, num_actions)
    truth_index = int(rng.integers(class_size))
    models = np.empty((class_size, num_states, num_actions, num_states))
    for i in range(class_size):
        if i == truth_index:
            models[i] = truth
            continue
        member = truth + perturbation * rng.random(truth.shape)
        models[i] = member / member.sum(axis=2, keepdims=True)
    return FiniteModelClass(models, truth_index)


def make_reference_scenario(seed: Optional[int], num_states: int, num_actions: int, horizon: int,
                            class_size: int, perturbation: float) -> Tuple[TabularMDP, FiniteModelClass]:
    """Random finite class plus an MDP whose transition is the class truth."""
    model_class = make_finite_class(seed, num_states, num_actions, class_size, perturbation)
    mdp = make_random_mdp(None if seed is None else seed + 1, num_states, num_actions, horizon,
                          transition=model_class.truth)
    return mdp, model_class


def _plan_on_support(mdp: TabularMDP, support: np.ndarray) -> TimePolicy:
    """Optimal policy among those taking only supported actions wherever some action is supported"""
    actions = np.zeros((mdp.horizon, mdp.num_states), dtype=int)
    next_values = np.zeros(mdp.num_states)
    rows = np.arange(mdp.num_states)
    has_support = support.any(axis=1)
    for h in range(mdp.horizon - 1, -1, -1):
        q = mdp.reward + mdp.transition @ next_values
        masked = np.where(support | ~has_support[:, None], q, -np.inf)
        actions[h] = masked.argmax(axis=1)
        next_values = q[rows, actions[h]]
    return TimePolicy.deterministic(actions, mdp.num_actions)


def make_partial_coverage_instance(seed: Optional[int], num_states: int, num_actions: int,
                                   horizon: int) -> Tuple[TabularMDP, OfflineDistribution, TimePolicy]:
    """Trap instance: state 0 starts every episode, states 1..S-2 form the good region, S-1 is the trap.

    Action 0 at the start leads into the good region; every other start action pays a one-step
    bait reward of 1 and falls into the absorbing zero-reward trap. rho covers (0, 0) and the good
    region only, so the bait pairs are reachable but never observed.
    """
    if num_states < 3:
        raise InvalidParameterError("num_states", num_states, ">= 3")
    if num_actions < 2:
        raise InvalidParameterError("num_actions", num_actions, ">= 2")
    rng = np.random.default_rng(seed)
    good = np.arange(1, num_states - 1)
    trap = num_states - 1

    transition = np.zeros((num_states, num_actions, num_states))
    transition[0, 0, good] = rng.dirichlet(np.ones(good.size))
    transition[0, 1:, trap] = 1.0
    for s in good:
        transition[s][:, good] = rng.dirichlet(np.ones(good.size), size=num_actions)
    transition[trap, :, trap] = 1.0
    transition /= transition.sum(axis=2, keepdims=True)

    reward = np.zeros((num_states, num_actions))
    reward[0, 0] = rng.uniform(0.0, 0.3)
    reward[0, 1:] = 1.0
    reward[good] = rng.uniform(0.6, 1.0, size=(good.size, num_actions))
    initial = np.zeros(num_states)
    initial[0] = 1.0
    mdp = TabularMDP(transition, reward, initial, horizon)

    support = np.zeros((num_states, num_actions), dtype=bool)
    support[0, 0] = True
    support[good] = True
    weights = np.zeros((num_states, num_actions))
    weights[support] = rng.dirichlet(np.ones(int(support.sum())))
    rho = OfflineDistribution(weights / weights.sum(), source="partial_coverage")

    comparator = _plan_on_support(mdp, support)
    logger.info(f"🪤 Partial-coverage instance built: S={num_states}, A={num_actions}, H={horizon}")
    return mdp, rho, comparator


def make_trap_class(seed: Optional[int], mdp: TabularMDP, rho: OfflineDistribution, class_size: int,
                    perturbation: float, agreeing_fraction: float = 0.5) -> FiniteModelClass:
    """Realizable class around a trap instance.

    Every non-truth member is optimistic on the pairs rho never covers: there it moves
    deterministically to the state with the highest optimal value under P*. A share
    `agreeing_fraction` of them equals P* on the covered pairs, so no dataset can tell them apart
    from the truth; the rest are perturbed there as well.
    """
    if class_size < 1:
        raise InvalidParameterError("class_size", class_size, ">= 1")
    if not 0 < perturbation <= 1:
        raise InvalidParameterError("perturbation", perturbation, "in (0, 1]")
    if not 0 <= agreeing_fraction <= 1:
        raise InvalidParameterError("agreeing_fraction", agreeing_fraction, "in [0, 1]")
    rng = np.random.default_rng(seed)
    truth = mdp.transition
    covered = rho.support
    optimal_values = evaluate_policy(mdp, plan_optimal(mdp)[0]).values
    best_state = int(optimal_values[min(1, mdp.horizon - 1)].argmax())
    optimistic = np.zeros(mdp.num_states)
    optimistic[best_state] = 1.0

    truth_index = int(rng.integers(class_size))
    others = [i for i in range(class_size) if i != truth_index]
    agreeing = set(rng.permutation(others)[:round(agreeing_fraction * len(others))].tolist())
    models = np.empty((class_size,) + truth.shape)
    for i in range(class_size):
        if i == truth_index:
            models[i] = truth
            continue
        member = truth.copy()
        if i not in agreeing:
            member = member + perturbation * rng.random(truth.shape)
            member /= member.sum(axis=2, keepdims=True)
        member[~covered] = optimistic
        models[i] = member
    logger.info(f"🪤 Trap class: {len(agreeing)} of {len(others)} decoys agree with P* on covered pairs")
    return FiniteModelClass(models, truth_index)


# Low-rank classes


@dataclass(frozen=True, eq=False)
class LowRankModelClass:
    """Finite Phi x Psi grid; only (mu, phi) pairs whose product is a valid transition table are retained."""

    phi_set: np.ndarray  # (N_phi, S, A, d)
    mu_set: np.ndarray  # (N_mu, S, d), mu(s') in R^d
    truth_pair: Tuple[int, int]  # (mu index, phi index)
    pairs: Tuple[Tuple[int, int], ...] = field(default=())
    models: np.ndarray = field(default=None)

    def __post_init__(self):
        phi_set = _frozen(self.phi_set)
        mu_set = _frozen(self.mu_set)
        if phi_set.ndim != 4 or mu_set.ndim != 3 or phi_set.shape[3] != mu_set.shape[2]:
            raise DimensionMismatchError("feature_dim", phi_set.shape, mu_set.shape)
        if phi_set.shape[1] != mu_set.shape[1]:
            raise DimensionMismatchError("num_states", phi_set.shape[1], mu_set.shape[1])
        norms = np.linalg.norm(phi_set, axis=3)
        if norms.max() > 1 + FEATURE_NORM_TOL:
            idx = tuple(int(i) for i in np.unravel_index(norms.argmax(), norms.shape))
            raise InvalidModelError(f"Feature norm {norms.max():.6f} exceeds 1", idx)
        object.__setattr__(self, "phi_set", phi_set)
        object.__setattr__(self, "mu_set", mu_set)

        pairs, models = [], []
        for i_mu, mu in enumerate(mu_set):
            for i_phi, phi in enumerate(phi_set):
                product = low_rank_product(mu, phi)
                valid = product.min() >= -LOW_RANK_TOL and np.all(np.abs(product.sum(axis=2) - 1) <= LOW_RANK_TOL)
                if not valid:
                    continue
                product = np.clip(product, 0.0, None)
                pairs.append((i_mu, i_phi))
                models.append(product / product.sum(axis=2, keepdims=True))
        truth_pair = (int(self.truth_pair[0]), int(self.truth_pair[1]))
        if truth_pair not in pairs:
            raise InvalidModelError("Truth pair does not produce a valid transition table", truth_pair)
        object.__setattr__(self, "truth_pair", truth_pair)
        object.__setattr__(self, "pairs", tuple(pairs))
        object.__setattr__(self, "models", _frozen(np.stack(models)))
        logger.info(f"🧩 Low-rank class: {len(pairs)}/{len(mu_set) * len(phi_set)} valid (mu, phi) pairs")

    @property
    def size(self) -> int:
        return len(self.pairs)

    @property
    def feature_dim(self) -> int:
        return self.phi_set.shape[3]

    @property
    def truth_index(self) -> int:
        return self.pairs.index(self.truth_pair)

    @property
    def truth(self) -> np.ndarray:
        return self.models[self.truth_index]

    @property
    def true_feature(self) -> np.ndarray:
        """phi* as an (S, A, d) table"""
        return self.phi_set[self.truth_pair[1]]

    def as_finite_class(self) -> FiniteModelClass:
        return FiniteModelClass(self.models, self.truth_index)


def low_rank_product(mu: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """P(s'|s,a) = mu(s')^T phi(s,a); the normalizer is the finite sum over s'"""
    return np.einsum("pk,sak->sap", mu, phi)


def make_low_rank_class(seed: Optional[int], num_states: int, num_actions: int, latent_dim: int,
                        num_phi: int, num_mu: int, num_signed_mu: int = 0,
                        phi_kind: str = "soft") -> LowRankModelClass:
    """Latent-variable embedding: phi(s,a) in Delta(d), columns of mu are distributions over s'.

    `num_signed_mu` extra mu candidates get column-sum-preserving signed noise, so some of their
    products turn negative and are filtered out.
    """
    rng = np.random.default_rng(seed)
    if phi_kind == "soft":
        phi_set = rng.dirichlet(np.full(latent_dim, 0.5), size=(num_phi, num_states, num_actions))
    elif phi_kind == "one_hot":
        phi_set = np.eye(latent_dim)[rng.integers(latent_dim, size=(num_phi, num_states, num_actions))]
    else:
        raise InvalidParameterError("phi_kind", phi_kind, "'soft' or 'one_hot'")
    columns = rng.dirichlet(np.ones(num_states), size=(num_mu, latent_dim))  # (N_mu, d, S)
    mu_set = np.transpose(columns, (0, 2, 1))
    if num_signed_mu:
        base = mu_set[rng.integers(num_mu, size=num_signed_mu)]
        noise = rng.normal(scale=0.5 / num_states, size=base.shape)
        noise -= noise.mean(axis=1, keepdims=True)
        mu_set = np.concatenate([mu_set, base + noise])
    truth_pair = (int(rng.integers(num_mu)), int(rng.integers(num_phi)))
    return LowRankModelClass(phi_set, mu_set, truth_pair)


# KNR models


class TabularFeature:
    """Feature map over finite state ids, enumerated as an (S, A, d) table."""

    def __init__(self, table: np.ndarray):
        self.table = _frozen(table)
        if self.table.ndim != 3:
            raise DimensionMismatchError("feature", "(S, A, d)", self.table.shape)
        norms = np.linalg.norm(self.table, axis=2)
        if norms.max() > 1 + FEATURE_NORM_TOL:
            idx = tuple(int(i) for i in np.unravel_index(norms.argmax(), norms.shape))
            raise InvalidModelError(f"Feature norm {norms.max():.6f} exceeds 1", idx)

    @property
    def dim(self) -> int:
        return self.table.shape[2]

    def __call__(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.table[np.asarray(states, dtype=int).reshape(-1), np.asarray(actions, dtype=int)]


class ActionBlockFeature:
    """phi(s, a) = e_a (x) [tanh(s), 1] / sqrt(d_S + 1); norm at most 1 for every real state."""

    def __init__(self, state_dim: int, num_actions: int):
        self.state_dim = state_dim
        self.num_actions = num_actions

    @property
    def dim(self) -> int:
        return self.num_actions * (self.state_dim + 1)

    def __call__(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        actions = np.asarray(actions, dtype=int).reshape(-1)
        block = np.concatenate([np.tanh(states), np.ones((states.shape[0], 1))], axis=1)
        block /= np.sqrt(self.state_dim + 1)
        out = np.zeros((states.shape[0], self.num_actions, self.state_dim + 1))
        out[np.arange(states.shape[0]), actions] = block
        return out.reshape(states.shape[0], self.dim)


def knr_one_hot_embedding(num_states: int, num_actions: int) -> TabularFeature:
    """(s, a) -> standard basis vector e_{s*|A| + a} in R^{|S||A|}"""
    return TabularFeature(np.eye(num_states * num_actions).reshape(num_states, num_actions, -1))


@dataclass(frozen=True, eq=False)
class KNRModel:
    """s' = W phi(s, a) + eps, eps ~ N(0, zeta^2 I)."""

    W: np.ndarray  # (d_S, d)
    feature: Any
    noise_sigma: float

    def __post_init__(self):
        object.__setattr__(self, "W", _frozen(self.W))
        if self.W.ndim != 2:
            raise DimensionMismatchError("W", "(d_S, d)", self.W.shape)
        if self.W.shape[1] != self.feature.dim:
            raise DimensionMismatchError("feature_dim", self.feature.dim, self.W.shape[1])
        if not self.noise_sigma > 0:
            raise InvalidParameterError("noise_sigma", self.noise_sigma, "> 0")

    @property
    def state_dim(self) -> int:
        return self.W.shape[0]

    def with_weights(self, W: np.ndarray) -> "KNRModel":
        return KNRModel(W, self.feature, self.noise_sigma)

    def mean_next(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.feature(states, actions) @ self.W.T

    def sample_next(self, states: np.ndarray, actions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        mean = self.mean_next(states, actions)
        return mean + self.noise_sigma * rng.standard_normal(mean.shape)

    def to_dict(self, states: Optional[np.ndarray] = None) -> Dict[str, Any]:
        document = {"W": self.W.tolist(), "zeta": self.noise_sigma}
        if isinstance(self.feature, TabularFeature):
            document["feature_table"] = self.feature.table.tolist()
        elif states is not None:
            states = np.atleast_2d(states)
            document["feature_table"] = [
                {"s": s.tolist(), "a": a, "phi": self.feature(s[None], [a])[0].tolist()}
                for s in states for a in range(self.feature.num_actions)
            ]
        return document


@dataclass(frozen=True, eq=False)
class SoftmaxFeedbackPolicy:
    """pi(a|s) proportional to exp((K s + b)_a / temperature); temperature 0 means argmax."""

    gain: np.ndarray  # (A, d_S)
    bias: np.ndarray  # (A,)
    temperature: float = 0.0

    def action_probs(self, states: np.ndarray) -> np.ndarray:
        scores = np.atleast_2d(states) @ self.gain.T + self.bias
        if self.temperature <= 0:
            return np.eye(self.bias.size)[scores.argmax(axis=1)]
        scores = (scores - scores.max(axis=1, keepdims=True)) / self.temperature
        weights = np.exp(scores)
        return weights / weights.sum(axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class GoalReward:
    """r(s, a) = exp(-||s - goal||^2 / width) - cost_a, clipped into [0, 1]"""

    goal: np.ndarray
    width: float = 1.0
    action_cost: Optional[np.ndarray] = None

    def __call__(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        value = np.exp(-((states - self.goal) ** 2).sum(axis=1) / self.width)
        if self.action_cost is not None:
            value = value - self.action_cost[np.asarray(actions, dtype=int)]
        return np.clip(value, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class KNRScenario:
    model: KNRModel
    action_set: Tuple[int, ...]
    candidate_policies: Tuple[SoftmaxFeedbackPolicy, ...]
    reward: GoalReward
    horizon: int
    initial_mean: np.ndarray
    initial_std: float

    def __post_init__(self):
        if not self.candidate_policies:
            raise InvalidParameterError("candidate_policies", 0, "non-empty")
        if self.horizon < 1:
            raise InvalidParameterError("horizon", self.horizon, ">= 1")


def make_knr_scenario(seed: Optional[int], state_dim: int = 2, num_actions: int = 3, horizon: int = 5,
                      noise_sigma: float = 0.1, num_policies: int = 8, weight_scale: float = 0.5) -> KNRScenario:
    """Desk-scale KNR: random W* with spectral norm `weight_scale`, goal-reaching reward, softmax feedback policies."""
    rng = np.random.default_rng(seed)
    feature = ActionBlockFeature(state_dim, num_actions)
    W = rng.normal(size=(state_dim, feature.dim))
    W *= weight_scale / np.linalg.norm(W, 2)
    model = KNRModel(W, feature, noise_sigma)

    policies = [SoftmaxFeedbackPolicy(np.zeros((num_actions, state_dim)), np.eye(num_actions)[a])
                for a in range(min(num_actions, num_policies))]
    while len(policies) < num_policies:
        policies.append(SoftmaxFeedbackPolicy(rng.normal(size=(num_actions, state_dim)),
                                              rng.normal(size=num_actions)))
    reward = GoalReward(goal=rng.uniform(-0.5, 0.5, size=state_dim), width=1.0)
    return KNRScenario(
        model=model,
        action_set=tuple(range(num_actions)),
        candidate_policies=tuple(policies),
        reward=reward,
        horizon=horizon,
        initial_mean=np.zeros(state_dim),
        initial_std=0.5,
    )


def save_scenario(path: Union[str, Path], document: Dict[str, Any]) -> None:
    with open(path, "w") as f:
        json.dump(document, f)


def load_scenario(path: Union[str, Path]) -> Dict[str, Any]:
    """Scenario document written by save_scenario"""
    try:
        with open(path, "r") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise ConfigError("scenario", f"file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError("scenario", f"invalid JSON: {e}") from e
