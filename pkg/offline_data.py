#!/usr/bin/env python3
"""
Offline data for model-based offline RL
Features:
- Offline distribution rho over (s, a), explicit or derived from a behaviour policy
- i.i.d. dataset sampling: (s, a) ~ rho, r = r(s, a), s' ~ P*(.|s, a)
- Line-delimited dataset files (tabular and KNR variants)
- Empirical expectations over the (s, a) marginal of a dataset
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from exceptions import (
    DimensionMismatchError,
    EmptyDatasetError,
    InvalidDistributionError,
    InvalidModelError,
    InvalidParameterError,
)
from mdp_core import (
    PROB_TOL,
    TabularMDP,
    TimePolicy,
    _frozen,
    check_distribution,
    occupancy,
    sample_categorical,
    weighted_l1sq,
)

logger = logging.getLogger(__name__)

STATIONARITY_TOL = 1e-6


def stationarity_gap(table: np.ndarray, transition: np.ndarray) -> float:
    """||rho_S - rho_S P||_1 where rho_S is the state marginal of rho"""
    state_marginal = table.sum(axis=1)
    stepped = np.einsum("sa,sap->p", table, transition)
    return float(np.abs(state_marginal - stepped).sum())


@dataclass(frozen=True, eq=False)
class OfflineDistribution:
    """Offline distribution rho in explicit table form; behaviour-form inputs are converted eagerly."""

    table: np.ndarray
    source: str = "explicit"
    behavior: Optional[TimePolicy] = None
    stationarity_gap: Optional[float] = None

    def __post_init__(self):
        table = _frozen(self.table)
        if table.ndim != 2:
            raise DimensionMismatchError("rho", "(S, A)", table.shape)
        check_distribution(table, "rho", PROB_TOL)
        object.__setattr__(self, "table", table)

    @property
    def num_states(self) -> int:
        return self.table.shape[0]

    @property
    def num_actions(self) -> int:
        return self.table.shape[1]

    @property
    def support(self) -> np.ndarray:
        return self.table > 0

    @property
    def is_stationary(self) -> bool:
        return self.stationarity_gap is not None and self.stationarity_gap < STATIONARITY_TOL

    def min_behavior_prob(self) -> float:
        if self.behavior is None:
            raise InvalidDistributionError("rho was not built from a behaviour policy")
        return float(self.behavior.action_probs.min())

    def to_dict(self) -> Dict[str, Any]:
        return {"source": self.source, "table": self.table.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "OfflineDistribution":
        return cls(np.asarray(data["table"], dtype=float), source=data.get("source", "explicit"))


def uniform_offline(num_states: int, num_actions: int) -> OfflineDistribution:
    return OfflineDistribution(np.full((num_states, num_actions), 1.0 / (num_states * num_actions)), source="uniform")


def occupancy_as_offline(mdp_true: TabularMDP, behavior: TimePolicy) -> OfflineDistribution:
    """rho = average occupancy of the behaviour policy under P*, with the stationarity check recorded."""
    table = occupancy(mdp_true, behavior).average
    table = table / table.sum()
    gap = stationarity_gap(table, mdp_true.transition)
    if gap >= STATIONARITY_TOL:
        logger.warning(f"⚠️ Behaviour occupancy is not stationary (gap {gap:.2e}); flag recorded")
    return OfflineDistribution(table, source="behavior", behavior=behavior, stationarity_gap=gap)


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    """i.i.d. transition tuples (s, a, r, s') stored column-wise."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    num_states: int
    num_actions: int
    seed: Optional[int] = None
    source: str = ""

    def __post_init__(self):
        for name in ("states", "actions", "next_states"):
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype=int).reshape(-1))
        object.__setattr__(self, "rewards", _frozen(self.rewards).reshape(-1))
        n = self.states.shape[0]
        for name in ("actions", "rewards", "next_states"):
            if getattr(self, name).shape[0] != n:
                raise DimensionMismatchError(name, n, getattr(self, name).shape[0])
        if n:
            if self.states.min() < 0 or self.states.max() >= self.num_states:
                raise InvalidModelError("State id out of range in dataset")
            if self.next_states.min() < 0 or self.next_states.max() >= self.num_states:
                raise InvalidModelError("Next-state id out of range in dataset")
            if self.actions.min() < 0 or self.actions.max() >= self.num_actions:
                raise InvalidModelError("Action id out of range in dataset")
            if not np.all((self.rewards >= 0) & (self.rewards <= 1)):
                raise InvalidModelError("Reward outside [0, 1] in dataset")

    @property
    def n(self) -> int:
        return int(self.states.shape[0])

    @property
    def records(self) -> List[Dict[str, Any]]:
        return [
            {"s": int(s), "a": int(a), "r": float(r), "sp": int(sp)}
            for s, a, r, sp in zip(self.states, self.actions, self.rewards, self.next_states)
        ]

    def head(self, count: int) -> "OfflineDataset":
        """First `count` records, same provenance"""
        return OfflineDataset(self.states[:count], self.actions[:count], self.rewards[:count],
                              self.next_states[:count], self.num_states, self.num_actions,
                              self.seed, self.source)

    @classmethod
    def from_records(cls, records: List[Dict[str, Any]], num_states: int, num_actions: int,
                     seed: Optional[int] = None, source: str = "") -> "OfflineDataset":
        return cls(
            states=[r["s"] for r in records],
            actions=[r["a"] for r in records],
            rewards=[r["r"] for r in records],
            next_states=[r["sp"] for r in records],
            num_states=num_states,
            num_actions=num_actions,
            seed=seed,
            source=source,
        )


@dataclass(frozen=True, eq=False)
class KNRDataset:
    """Transitions with real-vector states: s' = W phi(s, a) + noise."""

    states: np.ndarray  # (n, d_S)
    actions: np.ndarray  # (n,)
    rewards: np.ndarray
    next_states: np.ndarray  # (n, d_S)
    num_actions: int
    seed: Optional[int] = None
    source: str = ""

    def __post_init__(self):
        object.__setattr__(self, "states", _frozen(self.states))
        object.__setattr__(self, "next_states", _frozen(self.next_states))
        object.__setattr__(self, "actions", _frozen(self.actions, dtype=int).reshape(-1))
        object.__setattr__(self, "rewards", _frozen(self.rewards).reshape(-1))
        if self.states.shape != self.next_states.shape:
            raise DimensionMismatchError("state_dim", self.states.shape, self.next_states.shape)
        if self.actions.shape[0] != self.states.shape[0]:
            raise DimensionMismatchError("actions", self.states.shape[0], self.actions.shape[0])

    @property
    def n(self) -> int:
        return int(self.states.shape[0])

    @property
    def state_dim(self) -> int:
        return int(self.states.shape[1])

    def head(self, count: int) -> "KNRDataset":
        return KNRDataset(self.states[:count], self.actions[:count], self.rewards[:count],
                          self.next_states[:count], self.num_actions, self.seed, self.source)


def sample_knr_dataset(model: Any, n: int, num_actions: int, state_mean: np.ndarray, state_std: float,
                       seed: Optional[int] = None, reward: Optional[Any] = None,
                       source: str = "gaussian_uniform") -> KNRDataset:
    """s ~ N(state_mean, state_std^2 I), a ~ U(A), s' from model.sample_next; rewards default to 0"""
    if n < 0:
        raise InvalidParameterError("n", n, ">= 0")
    rng = np.random.default_rng(seed)
    state_mean = np.asarray(state_mean, dtype=float)
    states = state_mean + state_std * rng.standard_normal((n, state_mean.size))
    actions = rng.integers(num_actions, size=n)
    next_states = model.sample_next(states, actions, rng) if n else np.zeros((0, state_mean.size))
    rewards = reward(states, actions) if reward is not None and n else np.zeros(n)
    return KNRDataset(states, actions, rewards, next_states, num_actions, seed, source)


def _as_table(model: Union[TabularMDP, np.ndarray]) -> np.ndarray:
    return model.transition if isinstance(model, TabularMDP) else np.asarray(model, dtype=float)


def sample_dataset(mdp_true: TabularMDP, rho: Union[OfflineDistribution, np.ndarray], n: int,
                   seed: Optional[int] = None) -> OfflineDataset:
    """Draw n i.i.d. records: (s, a) ~ rho, r = r(s, a), s' ~ P*(.|s, a)."""
    if isinstance(rho, TimePolicy):
        raise InvalidDistributionError("Behaviour-form rho must go through occupancy_as_offline first")
    if not isinstance(rho, OfflineDistribution):
        rho = OfflineDistribution(np.asarray(rho, dtype=float))
    if n < 0:
        raise InvalidParameterError("n", n, ">= 0")
    if rho.table.shape != (mdp_true.num_states, mdp_true.num_actions):
        raise DimensionMismatchError("rho", (mdp_true.num_states, mdp_true.num_actions), rho.table.shape)

    rng = np.random.default_rng(seed)
    flat = rng.choice(rho.table.size, size=n, p=rho.table.ravel())
    states, actions = np.divmod(flat, mdp_true.num_actions)
    next_states = sample_categorical(rng, mdp_true.transition[states, actions]) if n else np.zeros(0, dtype=int)
    return OfflineDataset(
        states=states,
        actions=actions,
        rewards=mdp_true.reward[states, actions],
        next_states=next_states,
        num_states=mdp_true.num_states,
        num_actions=mdp_true.num_actions,
        seed=seed,
        source=rho.source,
    )


def transition_counts(dataset: OfflineDataset) -> np.ndarray:
    """(S, A, S) table of observed (s, a, s') counts"""
    S, A = dataset.num_states, dataset.num_actions
    flat = (dataset.states * A + dataset.actions) * S + dataset.next_states
    return np.bincount(flat, minlength=S * A * S).reshape(S, A, S).astype(float)


def pair_frequencies(dataset: OfflineDataset) -> np.ndarray:
    """Empirical (s, a) marginal of the dataset"""
    if dataset.n == 0:
        raise EmptyDatasetError("Empirical average over an empty dataset is undefined")
    flat = dataset.states * dataset.num_actions + dataset.actions
    counts = np.bincount(flat, minlength=dataset.num_states * dataset.num_actions)
    return counts.reshape(dataset.num_states, dataset.num_actions) / dataset.n


def empirical_l1sq(dataset: OfflineDataset, p: Union[TabularMDP, np.ndarray],
                   q: Union[TabularMDP, np.ndarray]) -> float:
    """(1/n) sum over records of ||p(.|s,a) - q(.|s,a)||_1^2; only the (s, a) marginal matters."""
    p_table, q_table = _as_table(p), _as_table(q)
    if p_table.shape != q_table.shape:
        raise DimensionMismatchError("transition", p_table.shape, q_table.shape)
    if p_table.shape[:2] != (dataset.num_states, dataset.num_actions):
        raise DimensionMismatchError("num_states", (dataset.num_states, dataset.num_actions), p_table.shape[:2])
    return weighted_l1sq(pair_frequencies(dataset), p_table, q_table)


def save_dataset(path: Union[str, Path], dataset: Union[OfflineDataset, KNRDataset]) -> None:
    """Header line with n, seed and source, then one JSON object per record."""
    with open(path, "w") as f:
        if isinstance(dataset, KNRDataset):
            header = {"kind": "knr", "n": dataset.n, "seed": dataset.seed, "source": dataset.source,
                      "num_actions": dataset.num_actions, "state_dim": dataset.state_dim}
            f.write(json.dumps(header) + "\n")
            for s, a, r, sp in zip(dataset.states, dataset.actions, dataset.rewards, dataset.next_states):
                f.write(json.dumps({"s": s.tolist(), "a": int(a), "r": float(r), "sp": sp.tolist()}) + "\n")
            return
        header = {"kind": "tabular", "n": dataset.n, "seed": dataset.seed, "source": dataset.source,
                  "num_states": dataset.num_states, "num_actions": dataset.num_actions}
        f.write(json.dumps(header) + "\n")
        for record in dataset.records:
            f.write(json.dumps(record) + "\n")


def load_dataset(path: Union[str, Path]) -> Union[OfflineDataset, KNRDataset]:
    with open(path, "r") as f:
        header = json.loads(f.readline())
        records = [json.loads(line) for line in f if line.strip()]
    if len(records) != header["n"]:
        raise DimensionMismatchError("n", header["n"], len(records))
    if header.get("kind") == "knr":
        state_dim = header["state_dim"]
        return KNRDataset(
            states=np.reshape([r["s"] for r in records], (-1, state_dim)),
            actions=[r["a"] for r in records],
            rewards=[r["r"] for r in records],
            next_states=np.reshape([r["sp"] for r in records], (-1, state_dim)),
            num_actions=header["num_actions"],
            seed=header.get("seed"),
            source=header.get("source", ""),
        )
    return OfflineDataset.from_records(records, header["num_states"], header["num_actions"],
                                       header.get("seed"), header.get("source", ""))
