#!/usr/bin/env python3
"""
Config-driven experiment runner
Features:
- Scenario construction for every configured family (random finite, trap, tabular, low-rank, KNR, file)
- Gap-vs-n curves with a log-log slope over a configurable window
- Paired CPPO vs naive certainty-equivalent separation under partial coverage
- PS-PO gap-vs-T sweeps, Bayesian gap estimates, coverage reports, low-rank and KNR diagnostics
- CSV/JSON emission with sorted rows so outputs do not depend on the thread count
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from coverage import CoverageReport, coverage_report
from cppo import cppo_optimize, cppo_pipeline, naive_certainty_equivalent
from estimation import (
    ThresholdPolicy,
    build_version_space,
    calibrate_threshold,
    cppo_gap_bound,
    loglog_slope,
    mle_finite,
    mle_tabular,
    pspo_gap_bound,
    sample_tabular_version_space,
    tabular_gap_bound,
)
from exceptions import ConfigError, InvalidParameterError
from experiment_config import ExperimentConfig, PriorConfig, ScenarioConfig
from knr_planning import (
    knr_ball_feasibility,
    knr_coverage,
    knr_cppo,
    knr_posterior,
    knr_pspo,
    sample_scenario_dataset,
)
from lowrank_offline import lowrank_gap_diagnostics, make_low_rank_scenario, mle_low_rank
from mdp_core import TabularMDP, TimePolicy, plan_optimal, policy_value
from model_zoo import (
    FiniteModelClass,
    KNRScenario,
    LowRankModelClass,
    knr_one_hot_embedding,
    load_scenario,
    make_knr_scenario,
    make_partial_coverage_instance,
    make_random_mdp,
    make_reference_scenario,
    make_trap_class,
)
from offline_data import OfflineDataset, OfflineDistribution, empirical_l1sq, sample_dataset, uniform_offline
from pspo import (
    DirichletPrior,
    DiscretePrior,
    ModelPrior,
    bayesian_gap_estimate,
    lcb_gap_term,
    posterior_update,
    pspo_run,
)
from trial_pool import map_trials

logger = logging.getLogger(__name__)

__all__ = [
    "ExperimentOrchestrator",
    "ExperimentResult",
    "Scenario",
    "TrialOutcome",
    "build_prior",
    "build_scenario",
    "lcb_floor",
    "loglog_slope",
    "reference_gap_bound",
    "run_algorithm",
    "run_coverage",
    "run_gap_experiment",
    "run_pspo_T_sweep",
    "run_separation_experiment",
    "scenario_coverage",
    "scenario_from_file",
    "scenario_prior",
    "write_csv",
]

GAP_COLUMNS = ["n", "trial", "gap", "xi", "version_space_size", "truth_in_space"]
SEPARATION_COLUMNS = ["n", "seed", "cppo_gap", "naive_gap", "cppo_truth_in_space"]
PSPO_COLUMNS = ["T", "trial", "best_iterate_gap", "floor"]
FLOOR_TOL = 1e-9
RATIO_COLUMNS = ["s", "a", "d_comparator", "rho", "ratio"]
BAYES_COLUMNS = ["n", "T", "mean_gap", "stderr", "mean_final_gap", "mean_lcb_term"]
LOWRANK_COLUMNS = ["n", "trial", "gap", "xi", "rhs", "within_bound", "truth_in_space", "rel_cond_number",
                   "C_d0", "rank_sigma_rho", "min_pib"]
KNR_COLUMNS = ["n", "ball_coverage", "cppo_choice", "cppo_true_value", "best_true_value", "pspo_final_value",
               "rel_cond_number", "rank_sigma_rho", "bound"]


@dataclass
class Scenario:
    """Everything an experiment needs about the environment; the algorithm only sees model_class and data."""

    family: str
    mdp: Optional[TabularMDP]
    rho: Optional[OfflineDistribution]
    comparator: Optional[TimePolicy]
    model_class: Union[None, FiniteModelClass, LowRankModelClass] = None
    knr: Optional[KNRScenario] = None

    @property
    def comparator_value(self) -> float:
        return policy_value(self.mdp, self.comparator)


@dataclass
class TrialOutcome:
    policy: TimePolicy
    xi: float
    version_space_size: int
    truth_in_space: bool


def build_scenario(config: ScenarioConfig, seed: Optional[int] = None) -> Scenario:
    """Instantiate the configured family; `seed` overrides config.seed."""
    seed = config.seed if seed is None else seed
    S, A, H = config.num_states, config.num_actions, config.horizon
    if config.path is not None:
        return scenario_from_file(config.path)
    if config.family == "random_finite":
        mdp, model_class = make_reference_scenario(seed, S, A, H, config.class_size, config.perturbation)
        comparator, _ = plan_optimal(mdp)
        return Scenario("random_finite", mdp, uniform_offline(S, A), comparator, model_class)
    if config.family == "trap":
        mdp, rho, comparator = make_partial_coverage_instance(seed, S, A, H)
        model_class = make_trap_class(seed + 1, mdp, rho, config.class_size, config.perturbation,
                                      config.agreeing_fraction)
        return Scenario("trap", mdp, rho, comparator, model_class)
    if config.family == "tabular":
        mdp = make_random_mdp(seed, S, A, H)
        comparator, _ = plan_optimal(mdp)
        return Scenario("tabular", mdp, uniform_offline(S, A), comparator)
    if config.family == "lowrank":
        low_rank = make_low_rank_scenario(seed, S, A, H, config.latent_dim, config.num_phi, config.num_mu,
                                          config.num_signed_mu, config.phi_kind)
        return Scenario("lowrank", low_rank.mdp, low_rank.rho, low_rank.comparator, low_rank.model_class)
    knr = make_knr_scenario(seed, config.state_dim, A, H, config.noise_sigma, config.num_policies)
    return Scenario("knr", None, None, None, knr=knr)


def _require_tabular(scenario: Scenario, experiment: str) -> None:
    if scenario.mdp is None:
        raise InvalidParameterError("scenario.family", scenario.family, f"a tabular family for {experiment}")


def scenario_from_file(path: Union[str, Path]) -> Scenario:
    """Class document written by gen-mdp; rho falls back to uniform when the document has none"""
    document = load_scenario(path)
    if "class" not in document:
        raise ConfigError("scenario.class", "scenario file has no model class")
    mdp, model_class = FiniteModelClass.from_dict(document)
    rho = (OfflineDistribution.from_dict(document["rho"]) if "rho" in document
           else uniform_offline(mdp.num_states, mdp.num_actions))
    comparator, _ = plan_optimal(mdp)
    return Scenario("path", mdp, rho, comparator, model_class)


def scenario_prior(scenario: Scenario, concentration: float) -> ModelPrior:
    if scenario.model_class is None:
        return DirichletPrior.symmetric(scenario.mdp.num_states, scenario.mdp.num_actions, concentration)
    finite = scenario.model_class
    if isinstance(finite, LowRankModelClass):
        finite = finite.as_finite_class()
    return DiscretePrior.uniform(finite)


def build_prior(config: PriorConfig, scenario: Scenario) -> ModelPrior:
    if config.kind == "dirichlet":
        if scenario.mdp is None:
            raise ConfigError("prior.kind", "dirichlet prior needs a tabular scenario")
        return DirichletPrior.symmetric(scenario.mdp.num_states, scenario.mdp.num_actions, config.concentration)
    finite = scenario.model_class
    if isinstance(finite, LowRankModelClass):
        finite = finite.as_finite_class()
    if not isinstance(finite, FiniteModelClass):
        raise ConfigError("prior.kind", f"{config.kind} prior needs a finite model class")
    if config.kind == "uniform":
        return DiscretePrior.uniform(finite)
    if config.kind == "point_mass":
        if config.index >= finite.size:
            raise ConfigError("prior.index", f"index {config.index} outside a class of size {finite.size}")
        return DiscretePrior.point_mass(finite, config.index)
    if len(config.weights) != finite.size:
        raise ConfigError("prior.weights", f"expected {finite.size} weights, got {len(config.weights)}")
    weights = np.asarray(config.weights, dtype=float)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ConfigError("prior.weights", "weights must be non-negative with a positive sum")
    return DiscretePrior(finite, weights / weights.sum())


def lcb_floor(scenario: Scenario, dataset: OfflineDataset, threshold: ThresholdPolicy, seed: Optional[int] = None,
              prior_concentration: float = 1.0, num_candidates: int = 20) -> float:
    """Version-space LCB term at the comparator for one dataset; tabular scenarios use sampled candidates"""
    mdp = scenario.mdp
    if scenario.model_class is None:
        mle_table = mle_tabular(dataset, mdp.num_states, mdp.num_actions)
        rule = threshold.model_copy(update={"rule": "tabular"})
        xi = rule.xi(dataset.n, num_states=mdp.num_states, num_actions=mdp.num_actions)
        candidates = sample_tabular_version_space(dataset, mle_table, xi, num_candidates, prior_concentration, seed)
        return lcb_gap_term(candidates.models, scenario.comparator, mdp)
    finite = scenario.model_class
    if isinstance(finite, LowRankModelClass):
        finite = finite.as_finite_class()
    version_space = build_version_space(finite, mle_finite(finite, dataset), dataset, threshold)
    return lcb_gap_term(version_space, scenario.comparator, mdp)


def run_algorithm(scenario: Scenario, dataset: OfflineDataset, algorithm: Any, threshold: ThresholdPolicy,
                  seed: Optional[int] = None, prior_concentration: float = 1.0,
                  num_candidates: int = 20) -> TrialOutcome:
    """One learner run on one dataset; `algorithm` is an AlgorithmConfig."""
    mdp = scenario.mdp
    model_class = scenario.model_class
    name = algorithm.name

    if name == "pspo":
        posterior = posterior_update(scenario_prior(scenario, prior_concentration), dataset)
        result = pspo_run(posterior, mdp, algorithm.T, algorithm.eta, seed, truth=mdp, mode=algorithm.update_mode)
        support = int(np.count_nonzero(posterior.weights)) if isinstance(posterior, DiscretePrior) else 0
        return TrialOutcome(result.policies[result.best_iterate], float("nan"), support, True)

    if model_class is None:
        mle_table = mle_tabular(dataset, mdp.num_states, mdp.num_actions)
        rule = threshold.model_copy(update={"rule": "tabular"})
        xi = rule.xi(dataset.n, num_states=mdp.num_states, num_actions=mdp.num_actions)
        truth_in_space = empirical_l1sq(dataset, mdp.transition, mle_table) <= xi
        if name == "naive":
            policy, _ = plan_optimal(mdp.with_transition(mle_table))
            return TrialOutcome(policy, xi, 1, truth_in_space)
        candidates = sample_tabular_version_space(dataset, mle_table, xi, num_candidates, prior_concentration, seed)
        result = cppo_optimize(candidates.models, mdp, algorithm.T, algorithm.eta, algorithm.update_mode)
        return TrialOutcome(result.policy, xi, candidates.size, truth_in_space)

    if isinstance(model_class, LowRankModelClass):
        fit = mle_low_rank(model_class, dataset)
        mle_index = model_class.pairs.index((fit.mu_index, fit.phi_index))
        if name == "naive":
            policy, _ = plan_optimal(mdp.with_transition(model_class.models[mle_index]))
            return TrialOutcome(policy, 0.0, 1, mle_index == model_class.truth_index)
        version_space = build_version_space(model_class, mle_index, dataset, threshold)
        result = cppo_optimize(version_space, mdp, algorithm.T, algorithm.eta, algorithm.update_mode)
        return TrialOutcome(result.policy, version_space.xi, version_space.size, version_space.contains_truth)

    if name == "naive":
        mle = mle_finite(model_class, dataset)
        policy = naive_certainty_equivalent(model_class, dataset, mdp)
        return TrialOutcome(policy, 0.0, 1, mle == model_class.truth_index)
    result = cppo_pipeline(model_class, dataset, threshold, mdp, algorithm.T, algorithm.eta,
                           mode=algorithm.update_mode)
    diagnostics = result.diagnostics
    return TrialOutcome(result.policy, diagnostics["xi"], diagnostics["version_space_size"],
                        diagnostics["truth_in_space"])


def reference_gap_bound(scenario: Scenario, n: int, algorithm: Any, threshold: ThresholdPolicy,
                        report: CoverageReport) -> float:
    """Unit-constant gap bound matching the scenario family and learner"""
    mdp = scenario.mdp
    H, S, A = mdp.horizon, mdp.num_states, mdp.num_actions
    class_size = None
    if isinstance(scenario.model_class, LowRankModelClass):
        class_size = len(scenario.model_class.pairs)
    elif scenario.model_class is not None:
        class_size = scenario.model_class.size
    if algorithm.name == "pspo":
        if class_size is None:
            return pspo_gap_bound(H, report.density_ratio_C, S * S * A * math.log(n * S * A), n, A, algorithm.T)
        return pspo_gap_bound(H, report.refined_C_dagger, math.log(class_size * n), n, A, algorithm.T)
    if class_size is None:
        return tabular_gap_bound(H, report.density_ratio_C, S, A, n, threshold.delta, c4=threshold.c2)
    return cppo_gap_bound(H, report.refined_C_dagger, class_size, n, threshold.delta, threshold.c2)


def write_csv(path: Union[str, Path], rows: List[Dict[str, Any]], columns: Sequence[str]) -> Path:
    """Header row plus rows sorted on the column order"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(rows, key=lambda row: tuple(_sort_key(row[c]) for c in columns))
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in ordered:
            writer.writerow({c: _cell(row[c]) for c in columns})
    logger.info(f"💾 Wrote {len(ordered)} rows to {path}")
    return path


def _sort_key(value: Any) -> Any:
    if isinstance(value, (bool, np.bool_)):
        return (0, int(value))
    if isinstance(value, (int, float, np.integer, np.floating)):
        value = float(value)
        return (0, value) if not math.isnan(value) else (1, 0.0)
    return (2, str(value))


def _cell(value: Any) -> Any:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def _write_json(path: Path, document: Dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(document, f, indent=2, default=_json_default)
    logger.info(f"💾 Wrote {path}")
    return path


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Not JSON serializable: {type(value).__name__}")


def _finite_or_none(value: float) -> Optional[float]:
    return float(value) if np.isfinite(value) else None


@dataclass
class ExperimentResult:
    rows: List[Dict[str, Any]]
    summary: Dict[str, Any] = field(default_factory=dict)
    paths: List[Path] = field(default_factory=list)


class ExperimentOrchestrator:
    """Runs one configured experiment; every random draw is derived from the root seed."""

    def __init__(self, config: ExperimentConfig, seed: Optional[int] = None, out: Optional[str] = None,
                 threads: Optional[int] = None):
        if out is not None:
            config = config.model_copy(update={"output": config.output.model_copy(update={"directory": out})})
        self.config = config
        self.seed = config.scenario.seed if seed is None else seed
        self.threads = threads
        self.logger = logging.getLogger(__name__)
        self.runners: Dict[str, Callable[[], ExperimentResult]] = {
            "gap": self.gap,
            "separation": self.separation,
            "pspo_T_sweep": self.pspo_T_sweep,
            "coverage": self.coverage,
            "bayesian_gap": self.bayesian_gap,
            "lowrank": self.lowrank,
            "knr": self.knr,
        }
        self.logger.info(f"🚀 Experiment orchestrator initialized ({config.experiment}, seed={self.seed})")

    def run(self) -> ExperimentResult:
        return self.runners[self.config.experiment]()

    def _threshold(self, scenario: Scenario, n: int) -> ThresholdPolicy:
        algorithm = self.config.algorithm
        if not algorithm.calibrate or scenario.model_class is None:
            return algorithm.threshold
        calibration = calibrate_threshold(scenario.model_class, scenario.mdp, scenario.rho, n,
                                          algorithm.threshold.delta, algorithm.calibration_trials,
                                          self.seed + n, algorithm.threshold, threads=self.threads)
        return calibration.policy

    def _run(self, scenario: Scenario, dataset: OfflineDataset, threshold: ThresholdPolicy,
             seed: int) -> TrialOutcome:
        return run_algorithm(scenario, dataset, self.config.algorithm, threshold, seed,
                             self.config.scenario.prior_concentration, self.config.scenario.class_size)

    def gap(self) -> ExperimentResult:
        """Gap against the comparator for every (n, trial); medians and slope go in the summary."""
        config = self.config
        scenario = build_scenario(config.scenario, self.seed)
        _require_tabular(scenario, "the gap experiment")
        n_grid, trials = config.sweep.n_grid, config.sweep.trials
        thresholds = {n: self._threshold(scenario, n) for n in n_grid}
        target = scenario.comparator_value

        def trial(index: int, trial_seed: int) -> Dict[str, Any]:
            n, t = n_grid[index // trials], index % trials
            rng = np.random.default_rng(trial_seed)
            dataset = sample_dataset(scenario.mdp, scenario.rho, n, int(rng.integers(2 ** 63)))
            outcome = self._run(scenario, dataset, thresholds[n], int(rng.integers(2 ** 63)))
            return {"n": n, "trial": t, "gap": target - policy_value(scenario.mdp, outcome.policy),
                    "xi": outcome.xi, "version_space_size": outcome.version_space_size,
                    "truth_in_space": bool(outcome.truth_in_space)}

        rows = map_trials(trial, len(n_grid) * trials, self.seed, self.threads)
        medians = [float(np.median([r["gap"] for r in rows if r["n"] == n])) for n in n_grid]
        lo, hi = config.sweep.slope_window or (0, len(n_grid) - 1)
        slope = loglog_slope(n_grid[lo:hi + 1], medians[lo:hi + 1])
        report = scenario_coverage(scenario)
        bounds = [_finite_or_none(reference_gap_bound(scenario, n, config.algorithm, thresholds[n], report))
                  for n in n_grid]
        low, high = config.sweep.slope_range
        summary = {
            "experiment": "gap",
            "algorithm": config.algorithm.name,
            "n_grid": n_grid,
            "median_gap": medians,
            "reference_bound": bounds,
            "slope": _finite_or_none(slope),
            "slope_in_range": bool(low <= slope <= high) if np.isfinite(slope) else None,
            "capture_rate": float(np.mean([r["truth_in_space"] for r in rows])),
        }
        self.logger.info(f"📉 Gap medians {['%.4g' % m for m in medians]} (slope {slope:.3f})")
        paths = [write_csv(config.output_path("gap_csv"), rows, GAP_COLUMNS),
                 _write_json(config.output_path("report_json"), summary)]
        return ExperimentResult(rows, summary, paths)

    def separation(self) -> ExperimentResult:
        """Paired seeds: each seed builds its own instance and dataset, shared by CPPO and the naive learner."""
        config = self.config
        n_grid, trials = config.sweep.n_grid, config.sweep.trials
        cppo_config = config.algorithm.model_copy(update={"name": "cppo"})
        naive_config = config.algorithm.model_copy(update={"name": "naive"})

        def trial(index: int, trial_seed: int) -> Dict[str, Any]:
            n, t = n_grid[index // trials], index % trials
            scenario = build_scenario(config.scenario, self.seed + t)
            _require_tabular(scenario, "the separation experiment")
            rng = np.random.default_rng(trial_seed)
            dataset = sample_dataset(scenario.mdp, scenario.rho, n, int(rng.integers(2 ** 63)))
            algorithm_seed = int(rng.integers(2 ** 63))
            threshold = config.algorithm.threshold
            cppo = run_algorithm(scenario, dataset, cppo_config, threshold, algorithm_seed,
                                 config.scenario.prior_concentration, config.scenario.class_size)
            naive = run_algorithm(scenario, dataset, naive_config, threshold, algorithm_seed)
            target = scenario.comparator_value
            return {"n": n, "seed": self.seed + t,
                    "cppo_gap": target - policy_value(scenario.mdp, cppo.policy),
                    "naive_gap": target - policy_value(scenario.mdp, naive.policy),
                    "cppo_truth_in_space": bool(cppo.truth_in_space)}

        rows = map_trials(trial, len(n_grid) * trials, self.seed, self.threads)
        per_n = {}
        for n in n_grid:
            subset = [r for r in rows if r["n"] == n]
            per_n[str(n)] = {
                "cppo_mean_gap": float(np.mean([r["cppo_gap"] for r in subset])),
                "naive_mean_gap": float(np.mean([r["naive_gap"] for r in subset])),
                "cppo_win_fraction": float(np.mean([r["cppo_gap"] < r["naive_gap"] for r in subset])),
            }
        summary = {"experiment": "separation", "per_n": per_n}
        for n, stats in per_n.items():
            self.logger.info(f"⚔️ n={n}: CPPO {stats['cppo_mean_gap']:.4f} vs naive {stats['naive_mean_gap']:.4f} "
                             f"(CPPO wins {stats['cppo_win_fraction']:.0%})")
        paths = [write_csv(config.output_path("separation_csv"), rows, SEPARATION_COLUMNS),
                 _write_json(config.output_path("report_json"), summary)]
        return ExperimentResult(rows, summary, paths)

    def pspo_T_sweep(self) -> ExperimentResult:
        """One PS-PO run to max(T_grid) per trial; the gap at T is the best iterate among the first T + 1."""
        config = self.config
        scenario = build_scenario(config.scenario, self.seed)
        _require_tabular(scenario, "the PS-PO sweep")
        T_values = sorted(set([1] + list(config.sweep.T_grid)))
        T_max = T_values[-1]
        n = config.sweep.n_grid[0]
        prior = scenario_prior(scenario, config.scenario.prior_concentration)
        target = scenario.comparator_value

        def trial(index: int, trial_seed: int) -> List[Dict[str, Any]]:
            rng = np.random.default_rng(trial_seed)
            dataset = sample_dataset(scenario.mdp, scenario.rho, n, int(rng.integers(2 ** 63)))
            posterior = posterior_update(prior, dataset)
            result = pspo_run(posterior, scenario.mdp, T_max, config.algorithm.eta, int(rng.integers(2 ** 63)),
                              truth=scenario.mdp, mode=config.algorithm.update_mode)
            floor = lcb_floor(scenario, dataset, config.algorithm.threshold, int(rng.integers(2 ** 63)),
                              config.scenario.prior_concentration, config.scenario.class_size)
            running_best = np.maximum.accumulate(result.values_under_truth)
            return [{"T": T, "trial": index, "best_iterate_gap": float(target - running_best[T]), "floor": floor}
                    for T in T_values]

        rows = [row for rows in map_trials(trial, config.sweep.trials, self.seed, self.threads) for row in rows]
        medians = {T: float(np.median([r["best_iterate_gap"] for r in rows if r["T"] == T])) for T in T_values}
        floors = [r["floor"] for r in rows if r["T"] == T_max]
        median_floor = float(np.median(floors))
        above_floor = [r["best_iterate_gap"] >= r["floor"] - FLOOR_TOL for r in rows if r["T"] == T_max]
        # the floor binds once the median gap has fallen to the median floor
        unbound = [T for T in T_values if medians[T] > median_floor + FLOOR_TOL and medians[T] > 0]
        slope = loglog_slope(unbound, [medians[T] for T in unbound])
        summary = {
            "experiment": "pspo_T_sweep",
            "n": n,
            "median_gap": {str(T): m for T, m in medians.items()},
            "non_increasing": bool(all(b <= a + 1e-12 for a, b in zip(medians.values(), list(medians.values())[1:]))),
            "median_floor": median_floor,
            "floor_respected_rate": float(np.mean(above_floor)),
            "unbound_T": unbound,
            "T_slope": slope,
        }
        self.logger.info(f"🎲 PS-PO sweep medians: {summary['median_gap']}, median floor {median_floor:.4g}, "
                         f"slope {slope:.3f} over T={unbound}")
        paths = [write_csv(config.output_path("pspo_csv"), rows, PSPO_COLUMNS),
                 _write_json(config.output_path("report_json"), summary)]
        return ExperimentResult(rows, summary, paths)

    def coverage(self) -> ExperimentResult:
        config = self.config
        scenario = build_scenario(config.scenario, self.seed)
        _require_tabular(scenario, "coverage")
        report = scenario_coverage(scenario)
        summary = {"experiment": "coverage", "family": scenario.family, **report.to_dict()}
        rows = report.ratio_rows()
        paths = [_write_json(config.output_path("coverage_json"), summary),
                 write_csv(config.output_path("ratio_csv"), rows, RATIO_COLUMNS)]
        return ExperimentResult(rows, summary, paths)

    def bayesian_gap(self) -> ExperimentResult:
        config = self.config
        scenario = build_scenario(config.scenario, self.seed)
        _require_tabular(scenario, "the Bayesian gap estimate")
        prior = scenario_prior(scenario, config.scenario.prior_concentration)
        rows = []
        for i, n in enumerate(config.sweep.n_grid):
            report = bayesian_gap_estimate(prior, scenario.rho, scenario.mdp, n, config.algorithm.T,
                                           config.algorithm.eta, max(config.sweep.trials, 10), self.seed + i,
                                           threads=self.threads)
            document = report.to_dict()
            rows.append({column: document[column] for column in BAYES_COLUMNS})
            rows[-1]["coverage"] = document["coverage"]
        means = [row["mean_gap"] for row in rows]
        summary = {"experiment": "bayesian_gap", "rows": rows,
                   "decreasing_end_to_end": bool(means[-1] < means[0]) if len(means) > 1 else None}
        csv_rows = [{c: ("" if row[c] is None else row[c]) for c in BAYES_COLUMNS} for row in rows]
        paths = [write_csv(config.output_path("gap_csv"), csv_rows, BAYES_COLUMNS),
                 _write_json(config.output_path("report_json"), summary)]
        return ExperimentResult(csv_rows, summary, paths)

    def lowrank(self) -> ExperimentResult:
        """Realized CPPO gap against the bound evaluated with the true feature, per (n, trial)"""
        config = self.config
        scenario = build_scenario(config.scenario.model_copy(update={"family": "lowrank"}), self.seed)
        threshold = config.algorithm.threshold.model_copy(update={"rule": "lowrank"})
        thresholds = {}
        for n in config.sweep.n_grid:
            thresholds[n] = threshold
            if config.algorithm.calibrate:
                thresholds[n] = calibrate_threshold(scenario.model_class, scenario.mdp, scenario.rho, n,
                                                    threshold.delta, config.algorithm.calibration_trials,
                                                    self.seed + n, threshold, threads=self.threads).policy
        n_grid, trials = config.sweep.n_grid, config.sweep.trials

        def trial(index: int, trial_seed: int) -> Dict[str, Any]:
            n, t = n_grid[index // trials], index % trials
            dataset = sample_dataset(scenario.mdp, scenario.rho, n, trial_seed)
            diagnostics = lowrank_gap_diagnostics(scenario.model_class, dataset, thresholds[n], scenario.comparator,
                                                  scenario.mdp, scenario.rho, config.algorithm.T,
                                                  config.algorithm.eta)
            return {"n": n, "trial": t, "within_bound": diagnostics.within_bound, **diagnostics.to_dict()}

        rows = map_trials(trial, len(n_grid) * trials, self.seed, self.threads)
        summary = {
            "experiment": "lowrank",
            "within_bound_rate": float(np.mean([r["within_bound"] for r in rows])),
            "capture_rate": float(np.mean([r["truth_in_space"] for r in rows])),
            "stationarity_gap": scenario.rho.stationarity_gap,
        }
        self.logger.info(f"🧩 Low-rank gap within bound in {summary['within_bound_rate']:.0%} of trials")
        paths = [write_csv(config.output_path("gap_csv"), rows, LOWRANK_COLUMNS),
                 _write_json(config.output_path("report_json"), summary)]
        return ExperimentResult(rows, summary, paths)

    def knr(self) -> ExperimentResult:
        """Ball feasibility rate per n, then one CPPO and one PS-PO run on a dataset of that size"""
        config = self.config
        algorithm = config.algorithm
        scenario = build_scenario(config.scenario.model_copy(update={"family": "knr"}), self.seed).knr
        threshold = algorithm.threshold.model_copy(update={"rule": "knr"})
        rows = []
        for i, n in enumerate(config.sweep.n_grid):
            seed = self.seed + i
            feasible = knr_ball_feasibility(scenario, n, config.sweep.trials, threshold, seed, self.threads)
            dataset = sample_scenario_dataset(scenario, n, seed)
            cppo = knr_cppo(scenario, dataset, threshold, algorithm.num_boundary, algorithm.num_rollouts, seed)
            posterior = knr_posterior(scenario, dataset, threshold.lam)
            pspo = knr_pspo(scenario, posterior, algorithm.T, algorithm.eta, algorithm.num_rollouts, seed)
            true_values = cppo.diagnostics["true_values"]
            best = int(np.argmax(true_values))
            coverage = knr_coverage(scenario, dataset, best, threshold.delta, algorithm.num_rollouts, seed)
            rows.append({
                "n": n,
                "ball_coverage": float(feasible.mean()),
                "cppo_choice": cppo.policy_index,
                "cppo_true_value": float(true_values[cppo.policy_index]),
                "best_true_value": float(true_values[best]),
                "pspo_final_value": float(pspo.values_under_truth[-1]),
                "rel_cond_number": coverage.rel_cond_number,
                "rank_sigma_rho": coverage.rank_sigma_rho,
                "bound": coverage.bound,
            })
            self.logger.info(f"🤖 KNR n={n}: ball coverage {feasible.mean():.2f}, CPPO picked {cppo.policy_index}")
        summary = {"experiment": "knr", "rows": rows}
        paths = [write_csv(config.output_path("gap_csv"), rows, KNR_COLUMNS),
                 _write_json(config.output_path("report_json"), summary)]
        return ExperimentResult(rows, summary, paths)


def scenario_coverage(scenario: Scenario) -> CoverageReport:
    """Coverage of the scenario's comparator; the feature is one-hot for tabular families, phi* for low-rank"""
    if isinstance(scenario.model_class, LowRankModelClass):
        return coverage_report(scenario.comparator, scenario.mdp, scenario.rho,
                               scenario.model_class.as_finite_class(), scenario.model_class.true_feature)
    feature = knr_one_hot_embedding(scenario.mdp.num_states, scenario.mdp.num_actions)
    return coverage_report(scenario.comparator, scenario.mdp, scenario.rho, scenario.model_class, feature)


def _with_experiment(config: ExperimentConfig, experiment: str) -> ExperimentConfig:
    return config.model_copy(update={"experiment": experiment})


def run_gap_experiment(config: ExperimentConfig, threads: Optional[int] = None) -> ExperimentResult:
    return ExperimentOrchestrator(_with_experiment(config, "gap"), threads=threads).run()


def run_separation_experiment(config: ExperimentConfig, threads: Optional[int] = None) -> ExperimentResult:
    return ExperimentOrchestrator(_with_experiment(config, "separation"), threads=threads).run()


def run_pspo_T_sweep(config: ExperimentConfig, threads: Optional[int] = None) -> ExperimentResult:
    return ExperimentOrchestrator(_with_experiment(config, "pspo_T_sweep"), threads=threads).run()


def run_coverage(config: ExperimentConfig, threads: Optional[int] = None) -> ExperimentResult:
    return ExperimentOrchestrator(_with_experiment(config, "coverage"), threads=threads).run()
