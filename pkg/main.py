#!/usr/bin/env python3
"""
Offline pessimism / posterior-sampling toolkit: command-line entry point.

    python main.py [--config PATH] [--seed N] [--out DIR] [--threads N] <subcommand> ...

Subcommands: gen-mdp, gen-data, run-cppo, run-pspo, coverage, experiment, verify.
Exit codes: 0 success, 1 verification failure, 2 invalid input.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from cppo import cppo_pipeline
from exceptions import ConfigError, OfflineRLError
from experiment_config import load_config, load_prior_config, parse_config
from experiments import (
    ExperimentOrchestrator,
    build_prior,
    build_scenario,
    run_algorithm,
    scenario_coverage,
    scenario_from_file,
    scenario_prior,
    write_csv,
)
from knr_planning import knr_cppo, knr_posterior, knr_pspo, sample_scenario_dataset
from mdp_core import policy_value, save_mdp
from model_zoo import FiniteModelClass, LowRankModelClass, save_scenario
from offline_data import KNRDataset, load_dataset, sample_dataset, save_dataset
from pspo import posterior_update, pspo_run
from verification import verify_all

# --- Initialization ---
load_dotenv()

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
EXIT_OK, EXIT_VERIFY_FAILED, EXIT_INVALID = 0, 1, 2


def configure_logging() -> None:
    name = os.getenv("OFFLINE_RL_LOG", "info").lower()
    logging.basicConfig(level=LOG_LEVELS.get(name, logging.INFO), format='%(asctime)s - %(levelname)s - %(message)s')
    if name not in LOG_LEVELS:
        logging.warning(f"⚠️ Unknown OFFLINE_RL_LOG={name!r}; using info")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="main.py", description="Offline RL with pessimism and posterior sampling")
    parser.add_argument("--config", help="experiment config JSON (defaults to configs/defaults.json)")
    parser.add_argument("--seed", type=int, help="root seed; overrides scenario.seed")
    parser.add_argument("--out", help="output directory; overrides output.directory and OFFLINE_RL_OUT")
    parser.add_argument("--threads", type=int, help="worker threads; overrides OFFLINE_RL_THREADS")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-mdp", help="write the configured scenario (MDP and model class) as JSON")
    gen_data = sub.add_parser("gen-data", help="sample an offline dataset from the configured scenario")
    gen_data.add_argument("--n", type=int, required=True)
    for name, help_text in (("run-cppo", "run CPPO on one dataset"), ("run-pspo", "run PS-PO on one dataset")):
        command = sub.add_parser(name, help=help_text)
        command.add_argument("--n", type=int, default=1000, help="dataset size when --dataset is not given")
        command.add_argument("--dataset", help="dataset file written by gen-data")
        if name == "run-pspo":
            command.add_argument("--prior", help="prior JSON: kind uniform, point_mass, weights or dirichlet")
    coverage = sub.add_parser("coverage", help="coverage coefficients of the scenario comparator")
    coverage.add_argument("--scenario", help="scenario file written by gen-mdp; defaults to the configured one")
    experiment = sub.add_parser("experiment", help="run the experiment named in the config")
    experiment.add_argument("--name", help="override config.experiment")
    verify = sub.add_parser("verify", help="run the invariant suite")
    verify.add_argument("--corrupt-row", type=int, nargs=2, metavar=("S", "A"),
                        help="break one transition row to exercise the failure path")
    return parser


class CommandRunner:
    """Resolves global flags against the config and environment, then dispatches one subcommand."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.logger = logging.getLogger(__name__)
        self.config = load_config(args.config)
        name = getattr(args, "name", None)
        if name:
            self.config = parse_config({**self.config.model_dump(by_alias=True), "experiment": name})
        self.seed = args.seed if args.seed is not None else self.config.scenario.seed
        out = args.out or os.getenv("OFFLINE_RL_OUT") or self.config.output.directory
        self.out = Path(out)
        self.config = self.config.model_copy(
            update={"output": self.config.output.model_copy(update={"directory": str(self.out)})})
        self.threads = args.threads

    def run(self) -> int:
        handlers = {
            "gen-mdp": self.gen_mdp,
            "gen-data": self.gen_data,
            "run-cppo": self.run_cppo,
            "run-pspo": self.run_pspo,
            "coverage": self.coverage,
            "experiment": self.experiment,
            "verify": self.verify,
        }
        return handlers[self.args.command]()

    def _write_json(self, name: str, document: Dict[str, Any]) -> Path:
        path = self.out_path(name)
        with open(path, "w") as f:
            json.dump(document, f, indent=2)
        return path

    def _dataset(self, scenario) -> Any:
        if getattr(self.args, "dataset", None):
            try:
                return load_dataset(self.args.dataset)
            except FileNotFoundError as e:
                raise ConfigError("dataset", f"file not found: {self.args.dataset}") from e
        if scenario.knr is not None:
            return sample_scenario_dataset(scenario.knr, self.args.n, self.seed)
        return sample_dataset(scenario.mdp, scenario.rho, self.args.n, self.seed)

    def gen_mdp(self) -> int:
        scenario = build_scenario(self.config.scenario, self.seed)
        if scenario.knr is not None:
            save_scenario(self.out_path("knr.json"), scenario.knr.model.to_dict())
            return EXIT_OK
        model_class = scenario.model_class
        if isinstance(model_class, LowRankModelClass):
            model_class = model_class.as_finite_class()
        if isinstance(model_class, FiniteModelClass):
            document = model_class.to_dict(scenario.mdp)
            document["rho"] = scenario.rho.to_dict()
            save_scenario(self.out_path("scenario.json"), document)
        else:
            save_mdp(self.out_path("mdp.json"), scenario.mdp)
        return EXIT_OK

    def out_path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        self.logger.info(f"💾 Writing {path}")
        return path

    def gen_data(self) -> int:
        scenario = build_scenario(self.config.scenario, self.seed)
        save_dataset(self.out_path("dataset.jsonl"), self._dataset(scenario))
        return EXIT_OK

    def run_cppo(self) -> int:
        scenario = build_scenario(self.config.scenario, self.seed)
        dataset = self._dataset(scenario)
        algorithm = self.config.algorithm.model_copy(update={"name": "cppo"})
        if isinstance(dataset, KNRDataset):
            result = knr_cppo(scenario.knr, dataset, algorithm.threshold, algorithm.num_boundary,
                              algorithm.num_rollouts, self.seed)
            self._write_json("cppo.json", {"policy_index": result.policy_index,
                                           "pessimistic_value": result.pessimistic_value,
                                           "xi": result.ball.xi,
                                           "truth_in_ball": result.diagnostics["truth_in_ball"],
                                           "true_values": result.diagnostics["true_values"]})
            return EXIT_OK
        if isinstance(scenario.model_class, FiniteModelClass):
            result = cppo_pipeline(scenario.model_class, dataset, algorithm.threshold, scenario.mdp, algorithm.T,
                                   algorithm.eta, mode=algorithm.update_mode)
            document = result.to_dict()
            document["gap"] = scenario.comparator_value - policy_value(scenario.mdp, result.policy)
            self._write_json("cppo.json", document)
            write_csv(self.out / "cppo_trajectory.csv", result.trajectory_rows(),
                      ["iteration", "pessimistic_value", "worst_model_index"])
            return EXIT_OK
        outcome = run_algorithm(scenario, dataset, algorithm, algorithm.threshold, self.seed,
                                self.config.scenario.prior_concentration, self.config.scenario.class_size)
        self._write_json("cppo.json", {
            "gap": scenario.comparator_value - policy_value(scenario.mdp, outcome.policy),
            "xi": outcome.xi,
            "version_space_size": outcome.version_space_size,
            "truth_in_space": bool(outcome.truth_in_space),
            "policy": outcome.policy.to_dict(),
        })
        return EXIT_OK

    def run_pspo(self) -> int:
        scenario = build_scenario(self.config.scenario, self.seed)
        dataset = self._dataset(scenario)
        algorithm = self.config.algorithm
        if isinstance(dataset, KNRDataset):
            posterior = knr_posterior(scenario.knr, dataset, algorithm.threshold.lam)
            result = knr_pspo(scenario.knr, posterior, algorithm.T, algorithm.eta, algorithm.num_rollouts, self.seed)
            rows = [{"iteration": t, "value_under_truth": v} for t, v in enumerate(result.values_under_truth)]
            write_csv(self.out / "pspo_trajectory.csv", rows, ["iteration", "value_under_truth"])
            return EXIT_OK
        if self.args.prior:
            prior = build_prior(load_prior_config(self.args.prior), scenario)
        else:
            prior = scenario_prior(scenario, self.config.scenario.prior_concentration)
        posterior = posterior_update(prior, dataset)
        result = pspo_run(posterior, scenario.mdp, algorithm.T, algorithm.eta, self.seed, truth=scenario.mdp,
                          mode=algorithm.update_mode)
        write_csv(self.out / "pspo_trajectory.csv", result.rows(),
                  ["iteration", "sampled_model_id", "value_under_truth"])
        target = scenario.comparator_value
        self._write_json("pspo.json", {
            "T": result.T,
            "eta": result.eta,
            "best_iterate": result.best_iterate,
            "best_iterate_gap": target - result.values_under_truth[result.best_iterate],
            "final_gap": target - result.values_under_truth[-1],
            "policy": result.final_policy.to_dict(),
        })
        return EXIT_OK

    def coverage(self) -> int:
        if self.args.scenario:
            scenario = scenario_from_file(self.args.scenario)
        else:
            scenario = build_scenario(self.config.scenario, self.seed)
        report = scenario_coverage(scenario)
        self._write_json(self.config.output.coverage_json, {"family": scenario.family, **report.to_dict()})
        write_csv(self.out / self.config.output.ratio_csv, report.ratio_rows(),
                  ["s", "a", "d_comparator", "rho", "ratio"])
        return EXIT_OK

    def experiment(self) -> int:
        ExperimentOrchestrator(self.config, self.seed, str(self.out), self.threads).run()
        return EXIT_OK

    def verify(self) -> int:
        corrupt = tuple(self.args.corrupt_row) if self.args.corrupt_row else None
        report = verify_all(self.seed, corrupt)
        self._write_json("verify.json", report.to_dict())
        for failure in report.failures:
            self.logger.error(f"❌ {failure.name}: {failure.detail}")
        return EXIT_OK if report.passed else EXIT_VERIFY_FAILED


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return CommandRunner(args).run()
    except OfflineRLError as e:
        logging.error(f"❌ {e}")
        return EXIT_INVALID


if __name__ == '__main__':
    sys.exit(main())
