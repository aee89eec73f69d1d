"""
Experiment configuration schema.

A config is a single JSON document; unknown keys are rejected and every
validation failure is reported with its dotted key path.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from estimation import ThresholdPolicy
from exceptions import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = Path(__file__).parent / "configs" / "defaults.json"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class ScenarioConfig(_Strict):
    family: Literal["random_finite", "trap", "tabular", "lowrank", "knr"] = "random_finite"
    seed: int = 0
    num_states: int = Field(default=6, ge=1)
    num_actions: int = Field(default=3, ge=1)
    horizon: int = Field(default=5, ge=1)
    class_size: int = Field(default=20, ge=1)
    perturbation: float = Field(default=0.5, gt=0, le=1)
    agreeing_fraction: float = Field(default=0.5, ge=0, le=1)  # trap decoys that match P* on covered pairs
    prior_concentration: float = Field(default=1.0, gt=0)
    latent_dim: int = Field(default=3, ge=1)
    num_phi: int = Field(default=3, ge=1)
    num_mu: int = Field(default=3, ge=1)
    num_signed_mu: int = Field(default=2, ge=0)
    phi_kind: Literal["soft", "one_hot"] = "soft"
    state_dim: int = Field(default=2, ge=1)
    noise_sigma: float = Field(default=0.1, gt=0)
    num_policies: int = Field(default=8, ge=1)
    path: Optional[str] = None  # class document written by gen-mdp

    @field_validator("path")
    @classmethod
    def _path_exists(cls, value: Optional[str]) -> Optional[str]:
        if value is not None and not Path(value).exists():
            raise ValueError(f"file not found: {value}")
        return value


class AlgorithmConfig(_Strict):
    name: Literal["cppo", "pspo", "naive"] = "cppo"
    T: int = Field(default=200, ge=0)
    eta: float = Field(default=0.09, gt=0)
    threshold: ThresholdPolicy = Field(default_factory=ThresholdPolicy)
    update_mode: Literal["per_step", "shared"] = "per_step"
    calibrate: bool = False
    calibration_trials: int = Field(default=200, ge=100)
    num_boundary: int = Field(default=64, ge=1)
    num_rollouts: int = Field(default=400, ge=1)


class SweepConfig(_Strict):
    n_grid: List[int] = Field(default_factory=lambda: [100, 1000, 10000])
    T_grid: List[int] = Field(default_factory=lambda: [4, 64, 1024])
    trials: int = Field(default=20, ge=1)
    slope_window: Optional[Tuple[int, int]] = None  # inclusive index range into n_grid
    slope_range: Tuple[float, float] = (-0.8, -0.25)

    @field_validator("n_grid", "T_grid")
    @classmethod
    def _increasing(cls, grid: List[int]) -> List[int]:
        if not grid:
            raise ValueError("grid must be non-empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("grid must be strictly increasing")
        if grid[0] < 1:
            raise ValueError("grid values must be >= 1")
        return grid


class PriorConfig(_Strict):
    """Belief for run-pspo. uniform and point_mass need a finite class, dirichlet a tabular scenario."""

    kind: Literal["uniform", "point_mass", "weights", "dirichlet"] = "uniform"
    index: Optional[int] = Field(default=None, ge=0)
    weights: Optional[List[float]] = None
    concentration: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def _fields_for_kind(self) -> "PriorConfig":
        if self.kind == "point_mass" and self.index is None:
            raise ValueError("point_mass prior needs an index")
        if self.kind == "weights" and not self.weights:
            raise ValueError("weights prior needs a non-empty weight list")
        return self


class OutputConfig(_Strict):
    directory: str = "results"
    gap_csv: str = "gap.csv"
    separation_csv: str = "separation.csv"
    pspo_csv: str = "pspo_T_sweep.csv"
    coverage_json: str = "coverage.json"
    ratio_csv: str = "coverage_ratios.csv"
    report_json: str = "report.json"


class ExperimentConfig(_Strict):
    experiment: Literal["gap", "separation", "pspo_T_sweep", "coverage", "bayesian_gap", "lowrank", "knr"] = "gap"
    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    algorithm: AlgorithmConfig = Field(default_factory=AlgorithmConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @model_validator(mode="after")
    def _step_size(self) -> "ExperimentConfig":
        if self.algorithm.name in ("cppo", "pspo") and not self.algorithm.eta < 1 / (2 * self.scenario.horizon):
            raise ValueError(f"algorithm.eta={self.algorithm.eta} must be below 1/(2H) = "
                             f"{1 / (2 * self.scenario.horizon):.6g}")
        return self

    def output_path(self, name: str) -> Path:
        return Path(self.output.directory) / getattr(self.output, name)


def _key_path(location: Tuple[Union[str, int], ...]) -> str:
    return ".".join(str(part) for part in location) or "<root>"


def parse_config(document: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(_key_path(first["loc"]), first["msg"]) from e


def _read_json(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise ConfigError("<file>", f"file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError("<file>", f"invalid JSON: {e}") from e


def load_config(path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """Read a config document; None loads the shipped defaults."""
    path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    config = parse_config(_read_json(path))
    logger.info(f"⚙️ Loaded {config.experiment} experiment config from {path}")
    return config


def load_prior_config(path: Union[str, Path]) -> PriorConfig:
    try:
        return PriorConfig.model_validate(_read_json(Path(path)))
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(_key_path(("prior",) + tuple(first["loc"])), first["msg"]) from e
