#!/usr/bin/env python3
"""
Exact finite-horizon tabular MDP machinery
Features:
- Backward dynamic programming for policy evaluation and optimal planning
- Per-step and horizon-averaged occupancy measures
- Simulation-lemma gap/bound pair and the performance-difference identity
- Multiplicative-weights (NPG) policy update, per-step or shared across steps
- Vectorized Monte Carlo rollouts used as an independent oracle
"""

import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Tuple, Union

import numpy as np
from scipy.special import rel_entr

from exceptions import (
    DimensionMismatchError,
    InvalidDistributionError,
    InvalidModelError,
    InvalidParameterError,
)

logger = logging.getLogger(__name__)

PROB_TOL = 1e-12
TIE_TOL = 1e-12
DISTRIBUTION_TOL = 1e-9
ROLLOUT_CHUNK = 200_000


def _frozen(array: Any, dtype=float) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def check_transition_table(transition: np.ndarray, tol: float = PROB_TOL) -> None:
    """Raise InvalidModelError at the first (s, a[, s']) breaking the stochastic-table invariants"""
    if transition.ndim != 3 or transition.shape[0] != transition.shape[2]:
        raise DimensionMismatchError("transition", "(S, A, S)", transition.shape)
    negative = np.argwhere(~(transition >= 0))
    if negative.size:
        s, a, sp = (int(i) for i in negative[0])
        raise InvalidModelError(f"Invalid transition probability {transition[s, a, sp]!r}", (s, a, sp))
    sums = transition.sum(axis=2)
    bad_rows = np.argwhere(~(np.abs(sums - 1.0) <= tol))
    if bad_rows.size:
        s, a = (int(i) for i in bad_rows[0])
        raise InvalidModelError(f"Transition row sums to {sums[s, a]!r}", (s, a))


def check_distribution(dist: np.ndarray, name: str, tol: float = DISTRIBUTION_TOL) -> None:
    if not np.all(dist >= 0):
        raise InvalidDistributionError(f"{name} has negative or NaN entries")
    total = float(dist.sum())
    if abs(total - 1.0) > tol:
        raise InvalidDistributionError(f"{name} sums to {total!r}, expected 1")


def sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """Draw one index per row of a (n, k) probability array"""
    cumulative = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None] * cumulative[:, -1:]
    return np.minimum((u > cumulative).sum(axis=1), probs.shape[1] - 1)


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Episodic MDP with a known reward; the ground truth P* is just a designated instance."""

    transition: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    horizon: int

    def __post_init__(self):
        transition = _frozen(self.transition)
        reward = _frozen(self.reward)
        initial_dist = _frozen(self.initial_dist)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "initial_dist", initial_dist)

        if int(self.horizon) < 1:
            raise InvalidParameterError("horizon", self.horizon, ">= 1")
        object.__setattr__(self, "horizon", int(self.horizon))

        check_transition_table(transition)
        num_states, num_actions = transition.shape[:2]
        if reward.shape != (num_states, num_actions):
            raise DimensionMismatchError("reward", (num_states, num_actions), reward.shape)
        out_of_range = np.argwhere(~((reward >= 0) & (reward <= 1)))
        if out_of_range.size:
            s, a = (int(i) for i in out_of_range[0])
            raise InvalidModelError(f"Reward {reward[s, a]!r} outside [0, 1]", (s, a))
        if initial_dist.shape != (num_states,):
            raise DimensionMismatchError("num_states", num_states, initial_dist.shape)
        try:
            check_distribution(initial_dist, "initial_dist", PROB_TOL)
        except InvalidDistributionError as e:
            raise InvalidModelError(str(e)) from e

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def with_transition(self, transition: np.ndarray) -> "TabularMDP":
        """Same reward, initial distribution and horizon under another transition model"""
        return TabularMDP(transition, self.reward, self.initial_dist, self.horizon)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "horizon": self.horizon,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "initial_dist": self.initial_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TabularMDP":
        mdp = cls(
            transition=np.asarray(data["transition"], dtype=float),
            reward=np.asarray(data["reward"], dtype=float),
            initial_dist=np.asarray(data["initial_dist"], dtype=float),
            horizon=int(data["horizon"]),
        )
        if mdp.num_states != int(data["num_states"]):
            raise DimensionMismatchError("num_states", data["num_states"], mdp.num_states)
        if mdp.num_actions != int(data["num_actions"]):
            raise DimensionMismatchError("num_actions", data["num_actions"], mdp.num_actions)
        return mdp


def save_mdp(path: Union[str, Path], mdp: TabularMDP) -> None:
    with open(path, "w") as f:
        json.dump(mdp.to_dict(), f)


def load_mdp(path: Union[str, Path]) -> TabularMDP:
    with open(path, "r") as f:
        return TabularMDP.from_dict(json.load(f))


@dataclass(frozen=True, eq=False)
class TimePolicy:
    """Horizon-indexed stochastic policy pi_h(a|s), stored as an (H, S, A) table."""

    action_probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.action_probs)
        if probs.ndim != 3:
            raise DimensionMismatchError("action_probs", "(H, S, A)", probs.shape)
        negative = np.argwhere(~(probs >= 0))
        if negative.size:
            h, s, a = (int(i) for i in negative[0])
            raise InvalidModelError(f"Invalid action probability {probs[h, s, a]!r}", (h, s, a))
        sums = probs.sum(axis=2)
        bad = np.argwhere(~(np.abs(sums - 1.0) <= PROB_TOL))
        if bad.size:
            h, s = (int(i) for i in bad[0])
            raise InvalidModelError(f"Policy row sums to {sums[h, s]!r}", (h, s))
        object.__setattr__(self, "action_probs", probs)

    @property
    def horizon(self) -> int:
        return self.action_probs.shape[0]

    @property
    def num_states(self) -> int:
        return self.action_probs.shape[1]

    @property
    def num_actions(self) -> int:
        return self.action_probs.shape[2]

    @classmethod
    def uniform(cls, horizon: int, num_states: int, num_actions: int) -> "TimePolicy":
        return cls(np.full((horizon, num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def deterministic(cls, actions: np.ndarray, num_actions: int) -> "TimePolicy":
        actions = np.asarray(actions, dtype=int)
        return cls(np.eye(num_actions)[actions])

    @classmethod
    def stationary(cls, probs: np.ndarray, horizon: int) -> "TimePolicy":
        """Replicate one S x A table across every step"""
        probs = np.asarray(probs, dtype=float)
        return cls(np.broadcast_to(probs, (horizon,) + probs.shape))

    @classmethod
    def random(cls, rng: np.random.Generator, horizon: int, num_states: int, num_actions: int,
               concentration: float = 1.0) -> "TimePolicy":
        probs = rng.dirichlet(np.full(num_actions, concentration), size=(horizon, num_states))
        return cls(probs / probs.sum(axis=2, keepdims=True))

    def greedy(self) -> "TimePolicy":
        """Deterministic rounding: most likely action per (h, s), lowest index on ties"""
        return TimePolicy.deterministic(self.action_probs.argmax(axis=2), self.num_actions)

    def is_deterministic(self) -> bool:
        return bool(np.all((self.action_probs == 0) | (self.action_probs == 1)))

    def is_stationary(self) -> bool:
        return bool(np.all(self.action_probs == self.action_probs[:1]))

    def kl_divergence(self, other: "TimePolicy", state_weights: np.ndarray) -> float:
        """Sum over (h, s) of weight_h(s) * KL(self_h(.|s) || other_h(.|s))"""
        per_state = rel_entr(self.action_probs, other.action_probs).sum(axis=2)
        return float((np.asarray(state_weights) * per_state).sum())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "horizon": self.horizon,
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "action_probs": self.action_probs.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TimePolicy":
        return cls(np.asarray(data["action_probs"], dtype=float))


@dataclass(frozen=True, eq=False)
class OccupancyMeasure:
    per_step: np.ndarray  # (H, S, A), each step sums to 1

    @property
    def average(self) -> np.ndarray:
        return self.per_step.mean(axis=0)

    @property
    def state_marginals(self) -> np.ndarray:
        """(H, S) state distributions d_h(s)"""
        return self.per_step.sum(axis=2)


@dataclass(frozen=True, eq=False)
class ValueTriple:
    values: np.ndarray  # V_h(s), (H, S)
    q_values: np.ndarray  # Q_h(s, a), (H, S, A)
    advantages: np.ndarray  # A_h(s, a) = Q_h(s, a) - V_h(s)
    value: float  # sum_s d0(s) V_0(s)


def check_compatible(mdp: TabularMDP, policy: TimePolicy) -> None:
    if policy.num_states != mdp.num_states:
        raise DimensionMismatchError("num_states", mdp.num_states, policy.num_states)
    if policy.num_actions != mdp.num_actions:
        raise DimensionMismatchError("num_actions", mdp.num_actions, policy.num_actions)
    if policy.horizon != mdp.horizon:
        raise DimensionMismatchError("horizon", mdp.horizon, policy.horizon)


def evaluate_policy(mdp: TabularMDP, policy: TimePolicy) -> ValueTriple:
    """Exact backward dynamic programming with V_H = 0."""
    check_compatible(mdp, policy)
    horizon = mdp.horizon
    values = np.zeros((horizon + 1, mdp.num_states))
    q_values = np.zeros((horizon, mdp.num_states, mdp.num_actions))
    for h in range(horizon - 1, -1, -1):
        q_values[h] = mdp.reward + mdp.transition @ values[h + 1]
        values[h] = np.einsum("sa,sa->s", policy.action_probs[h], q_values[h])
    advantages = q_values - values[:horizon, :, None]
    return ValueTriple(
        values=values[:horizon],
        q_values=q_values,
        advantages=advantages,
        value=float(mdp.initial_dist @ values[0]),
    )


def policy_value(mdp: TabularMDP, policy: TimePolicy) -> float:
    return evaluate_policy(mdp, policy).value


def occupancy(mdp: TabularMDP, policy: TimePolicy) -> OccupancyMeasure:
    check_compatible(mdp, policy)
    per_step = np.zeros((mdp.horizon, mdp.num_states, mdp.num_actions))
    per_step[0] = mdp.initial_dist[:, None] * policy.action_probs[0]
    for t in range(mdp.horizon - 1):
        next_states = np.einsum("sa,sap->p", per_step[t], mdp.transition)
        per_step[t + 1] = next_states[:, None] * policy.action_probs[t + 1]
    return OccupancyMeasure(per_step=per_step)


def plan_optimal(mdp: TabularMDP) -> Tuple[TimePolicy, float]:
    """Backward induction; ties go to the lowest action index."""
    actions = np.zeros((mdp.horizon, mdp.num_states), dtype=int)
    next_values = np.zeros(mdp.num_states)
    rows = np.arange(mdp.num_states)
    for h in range(mdp.horizon - 1, -1, -1):
        q = mdp.reward + mdp.transition @ next_values
        best = q.max(axis=1, keepdims=True)
        actions[h] = np.argmax(q >= best - TIE_TOL, axis=1)
        next_values = q[rows, actions[h]]
    policy = TimePolicy.deterministic(actions, mdp.num_actions)
    return policy, float(mdp.initial_dist @ next_values)


def l1_model_distance(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise InvalidDistributionError(f"Expected two 1-D distributions of equal size, got {p.shape} and {q.shape}")
    check_distribution(p, "p")
    check_distribution(q, "q")
    return float(np.abs(p - q).sum())


def row_l1_distances(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """(S, A) table of ||p(.|s,a) - q(.|s,a)||_1"""
    return np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


def weighted_l1sq(weights: np.ndarray, p: np.ndarray, q: np.ndarray) -> float:
    """sum_{s,a} w(s,a) ||p(.|s,a) - q(.|s,a)||_1^2"""
    return float((np.asarray(weights) * row_l1_distances(p, q) ** 2).sum())


def simulation_gap_bound(mdp_true: TabularMDP, mdp_alt: TabularMDP, policy: TimePolicy) -> Tuple[float, float]:
    """Return (|V_P - V_Phat|, H^2 E_{d^pi_P} ||P - Phat||_1)."""
    if mdp_true.transition.shape != mdp_alt.transition.shape:
        raise DimensionMismatchError("transition", mdp_true.transition.shape, mdp_alt.transition.shape)
    if mdp_true.horizon != mdp_alt.horizon:
        raise DimensionMismatchError("horizon", mdp_true.horizon, mdp_alt.horizon)
    if not (np.array_equal(mdp_true.reward, mdp_alt.reward)
            and np.array_equal(mdp_true.initial_dist, mdp_alt.initial_dist)):
        raise InvalidModelError("Simulation lemma needs a shared reward and initial distribution")

    gap = abs(policy_value(mdp_true, policy) - policy_value(mdp_alt, policy))
    d = occupancy(mdp_true, policy).average
    distances = row_l1_distances(mdp_true.transition, mdp_alt.transition)
    bound = mdp_true.horizon ** 2 * float((d * distances).sum())
    return gap, bound


def npg_step(policy: TimePolicy, advantage: Union[ValueTriple, np.ndarray], eta: float,
             mode: str = "per_step") -> TimePolicy:
    """pi'_h(a|s) proportional to pi_h(a|s) exp(eta A_h(s,a)).

    mode="shared" averages the advantage over h and applies one update to every step.
    """
    if not eta >= 0:
        raise InvalidParameterError("eta", eta, ">= 0")
    adv = advantage.advantages if isinstance(advantage, ValueTriple) else np.asarray(advantage, dtype=float)
    if adv.shape != policy.action_probs.shape:
        raise DimensionMismatchError("advantage", policy.action_probs.shape, adv.shape)
    if mode == "shared":
        adv = np.broadcast_to(adv.mean(axis=0), adv.shape)
    elif mode != "per_step":
        raise InvalidParameterError("mode", mode, "'per_step' or 'shared'")
    if eta == 0:
        return policy

    logits = eta * (adv - adv.max(axis=2, keepdims=True))
    weights = policy.action_probs * np.exp(logits)
    return TimePolicy(weights / weights.sum(axis=2, keepdims=True))


def performance_difference(mdp: TabularMDP, policy_new: TimePolicy, policy_old: TimePolicy) -> Tuple[float, float]:
    """(V^new - V^old, sum_h E_{d^new_h}[A^old_h]) -- equal up to round-off"""
    old = evaluate_policy(mdp, policy_old)
    new_value = policy_value(mdp, policy_new)
    d_new = occupancy(mdp, policy_new).per_step
    return new_value - old.value, float((d_new * old.advantages).sum())


def enumerate_deterministic_policies(horizon: int, num_states: int, num_actions: int) -> Iterator[TimePolicy]:
    for choice in itertools.product(range(num_actions), repeat=horizon * num_states):
        yield TimePolicy.deterministic(np.reshape(choice, (horizon, num_states)), num_actions)


def rollout_statistics(mdp: TabularMDP, policy: TimePolicy, num_rollouts: int,
                       seed: Optional[int] = None) -> Tuple[float, float, np.ndarray]:
    """Monte Carlo mean return, its standard error, and average (s, a) visit frequencies."""
    check_compatible(mdp, policy)
    rng = np.random.default_rng(seed)
    returns = np.zeros(num_rollouts)
    visits = np.zeros(mdp.num_states * mdp.num_actions)
    for start in range(0, num_rollouts, ROLLOUT_CHUNK):
        size = min(ROLLOUT_CHUNK, num_rollouts - start)
        states = sample_categorical(rng, np.broadcast_to(mdp.initial_dist, (size, mdp.num_states)))
        for h in range(mdp.horizon):
            actions = sample_categorical(rng, policy.action_probs[h][states])
            returns[start:start + size] += mdp.reward[states, actions]
            visits += np.bincount(states * mdp.num_actions + actions, minlength=visits.size)
            states = sample_categorical(rng, mdp.transition[states, actions])
    std_error = float(returns.std(ddof=1) / np.sqrt(num_rollouts)) if num_rollouts > 1 else float("inf")
    frequencies = visits.reshape(mdp.num_states, mdp.num_actions) / (num_rollouts * mdp.horizon)
    return float(returns.mean()), std_error, frequencies
