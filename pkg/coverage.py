#!/usr/bin/env python3
"""
Coverage and concentrability quantities
Features:
- Density-ratio concentrability and the per-(s, a) ratio table
- Refined (model-class) concentrability and the initial-distribution variant
- Relative condition numbers of feature second moments, ranks
- Prior-averaged versions of the above
- Numerical check of the Gaussian l1 bound used for KNRs
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import integrate, linalg
from scipy.stats import multivariate_normal, norm

from exceptions import DimensionMismatchError, InvalidModelError, InvalidParameterError
from mdp_core import OccupancyMeasure, TabularMDP, TimePolicy, occupancy, plan_optimal, weighted_l1sq
from model_zoo import FiniteModelClass, TabularFeature
from offline_data import OfflineDistribution

logger = logging.getLogger(__name__)

RANGE_TOL = 1e-10
PSD_TOL = 1e-10
INTEGRATION_RTOL = 1e-6
INTEGRATION_WIDTH = 8.0


def _pair_table(dist: Union[OccupancyMeasure, OfflineDistribution, np.ndarray]) -> np.ndarray:
    if isinstance(dist, OccupancyMeasure):
        return dist.average
    if isinstance(dist, OfflineDistribution):
        return dist.table
    return np.asarray(dist, dtype=float)


def _feature_table(feature: Union[TabularFeature, np.ndarray]) -> np.ndarray:
    return feature.table if isinstance(feature, TabularFeature) else np.asarray(feature, dtype=float)


def ratio_table(comparator: TimePolicy, mdp_true: TabularMDP,
                rho: Union[OfflineDistribution, np.ndarray]) -> np.ndarray:
    """d^{pi*}(s,a) / rho(s,a); +inf where only rho vanishes, nan at 0/0"""
    d = occupancy(mdp_true, comparator).average
    table = _pair_table(rho)
    if table.shape != d.shape:
        raise DimensionMismatchError("rho", d.shape, table.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = d / table
    ratios[(table == 0) & (d > 0)] = np.inf
    ratios[(table == 0) & (d == 0)] = np.nan
    return ratios


def concentrability(comparator: TimePolicy, mdp_true: TabularMDP, rho: Union[OfflineDistribution, np.ndarray]) -> float:
    ratios = ratio_table(comparator, mdp_true, rho)
    if np.all(np.isnan(ratios)):
        return 0.0
    return float(np.nanmax(ratios))


def _class_ratio(model_class: FiniteModelClass, truth: np.ndarray, numerator_weights: np.ndarray,
                 denominator_weights: np.ndarray) -> float:
    """sup over members of weighted squared-l1 error ratios, skipping 0/0 members"""
    best = 0.0
    for member in model_class.models:
        numerator = weighted_l1sq(numerator_weights, member, truth)
        denominator = weighted_l1sq(denominator_weights, member, truth)
        if denominator == 0:
            if numerator > 0:
                return float("inf")
            continue
        best = max(best, numerator / denominator)
    return best


def refined_concentrability(model_class: FiniteModelClass, comparator: TimePolicy, mdp_true: TabularMDP,
                            rho: Union[OfflineDistribution, np.ndarray]) -> float:
    d = occupancy(mdp_true, comparator).average
    return _class_ratio(model_class, mdp_true.transition, d, _pair_table(rho))


def initial_dist_concentrability(model_class: FiniteModelClass, mdp_true: TabularMDP,
                                 rho: Union[OfflineDistribution, np.ndarray]) -> float:
    """Same ratio with s ~ d0 and uniform actions in the numerator"""
    start = np.repeat(mdp_true.initial_dist[:, None], mdp_true.num_actions, axis=1) / mdp_true.num_actions
    return _class_ratio(model_class, mdp_true.transition, start, _pair_table(rho))


def feature_second_moment(feature: Union[TabularFeature, np.ndarray],
                          dist: Union[OccupancyMeasure, OfflineDistribution, np.ndarray]) -> np.ndarray:
    """E_{(s,a) ~ dist}[phi phi^T]"""
    table = _feature_table(feature)
    weights = _pair_table(dist)
    if weights.shape != table.shape[:2]:
        raise DimensionMismatchError("num_states", table.shape[:2], weights.shape)
    return np.einsum("sa,sai,saj->ij", weights, table, table)


def relative_condition_number(feature: Union[TabularFeature, np.ndarray],
                              dist_num: Union[OccupancyMeasure, OfflineDistribution, np.ndarray],
                              dist_den: Union[OccupancyMeasure, OfflineDistribution, np.ndarray],
                              ridge: float = 0.0) -> float:
    """Largest generalized eigenvalue of (Sigma_num, Sigma_den + ridge I).

    At ridge 0 the problem is solved on range(Sigma_den); +inf when Sigma_num reaches outside it.
    """
    return moment_condition_number(feature_second_moment(feature, dist_num),
                                   feature_second_moment(feature, dist_den), ridge)


def moment_condition_number(sigma_num: np.ndarray, sigma_den: np.ndarray, ridge: float = 0.0) -> float:
    """relative_condition_number on second-moment matrices already in hand (e.g. Monte Carlo estimates)"""
    if ridge < 0:
        raise InvalidParameterError("ridge", ridge, ">= 0")
    sigma_num = np.asarray(sigma_num, dtype=float)
    sigma_den = np.asarray(sigma_den, dtype=float) + ridge * np.eye(sigma_num.shape[0])
    if sigma_num.shape != sigma_den.shape:
        raise DimensionMismatchError("feature_dim", sigma_den.shape, sigma_num.shape)
    if ridge > 0:
        return float(linalg.eigh(sigma_num, sigma_den, eigvals_only=True).max())

    eigenvalues, vectors = linalg.eigh(sigma_den)
    scale = max(eigenvalues.max(), 0.0)
    in_range = eigenvalues > RANGE_TOL * scale if scale > 0 else np.zeros_like(eigenvalues, dtype=bool)
    basis = vectors[:, in_range]
    complement = vectors[:, ~in_range]
    numerator_scale = max(np.abs(sigma_num).max(), np.finfo(float).tiny)
    if complement.size and np.abs(complement.T @ sigma_num @ complement).max() > RANGE_TOL * numerator_scale:
        return float("inf")
    if basis.size == 0:
        logger.warning("⚠️ Denominator second moment is zero; relative condition number set to 0")
        return 0.0
    whitening = basis / np.sqrt(eigenvalues[in_range])
    reduced = whitening.T @ sigma_num @ whitening
    return float(linalg.eigh(reduced, eigvals_only=True).max())


def numerical_rank(matrix: np.ndarray, tol: float = 1e-9) -> int:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DimensionMismatchError("matrix", "square", matrix.shape)
    if not np.allclose(matrix, matrix.T, atol=PSD_TOL):
        raise InvalidModelError("Matrix is not symmetric")
    if linalg.eigh(matrix, eigvals_only=True).min() < -PSD_TOL:
        raise InvalidModelError("Matrix is not positive semidefinite")
    singular_values = linalg.svdvals(matrix)
    if singular_values.size == 0 or singular_values.max() == 0:
        return 0
    return int((singular_values > tol * singular_values.max()).sum())


@dataclass
class CoverageReport:
    density_ratio_C: float
    refined_C_dagger: Optional[float]
    rel_cond_number: Optional[float]
    C_d0: Optional[float]
    rank_sigma_rho: Optional[int]
    ratio_table: np.ndarray
    comparator_occupancy: np.ndarray
    rho: np.ndarray

    def to_dict(self) -> Dict[str, Any]:
        return {
            "density_ratio_C": _json_number(self.density_ratio_C),
            "refined_C_dagger": _json_number(self.refined_C_dagger),
            "rel_cond_number": _json_number(self.rel_cond_number),
            "C_d0": _json_number(self.C_d0),
            "rank_sigma_rho": self.rank_sigma_rho,
        }

    def ratio_rows(self) -> List[Dict[str, Any]]:
        rows = []
        for s, a in np.ndindex(self.ratio_table.shape):
            rows.append({"s": s, "a": a, "d_comparator": float(self.comparator_occupancy[s, a]),
                         "rho": float(self.rho[s, a]), "ratio": _json_number(self.ratio_table[s, a])})
        return rows


def _json_number(value: Optional[float]) -> Union[None, float, str]:
    if value is None:
        return None
    if np.isnan(value):
        return "nan"
    if np.isinf(value):
        return "inf"
    return float(value)


def coverage_report(comparator: TimePolicy, mdp_true: TabularMDP, rho: Union[OfflineDistribution, np.ndarray],
                    model_class: Optional[FiniteModelClass] = None,
                    feature: Union[None, TabularFeature, np.ndarray] = None) -> CoverageReport:
    d = occupancy(mdp_true, comparator)
    rho_table = _pair_table(rho)
    report = CoverageReport(
        density_ratio_C=concentrability(comparator, mdp_true, rho_table),
        refined_C_dagger=None,
        rel_cond_number=None,
        C_d0=None,
        rank_sigma_rho=None,
        ratio_table=ratio_table(comparator, mdp_true, rho_table),
        comparator_occupancy=d.average,
        rho=rho_table,
    )
    if model_class is not None:
        report.refined_C_dagger = refined_concentrability(model_class, comparator, mdp_true, rho_table)
        report.C_d0 = initial_dist_concentrability(model_class, mdp_true, rho_table)
    if feature is not None:
        report.rel_cond_number = relative_condition_number(feature, d, rho_table)
        report.rank_sigma_rho = numerical_rank(feature_second_moment(feature, rho_table))
    if model_class is not None and report.refined_C_dagger > report.density_ratio_C:
        logger.warning("⚠️ Refined concentrability exceeds the density ratio; check the comparator/rho pair")
    return report


@dataclass
class BayesianCoverageReport:
    draws: Dict[str, np.ndarray] = field(default_factory=dict)

    def mean(self, name: str) -> float:
        values = self.draws[name]
        if np.all(values == values[0]):
            return float(values[0])
        return float(values.mean())

    def stderr(self, name: str) -> float:
        values = self.draws[name]
        if not np.all(np.isfinite(values)):
            return float("nan")
        return float(values.std(ddof=1) / math.sqrt(values.size))

    def to_dict(self) -> Dict[str, Any]:
        return {name: {"mean": _json_number(self.mean(name)), "stderr": _json_number(self.stderr(name))}
                for name in self.draws}


def bayesian_coverage(prior: Any, rho: Union[OfflineDistribution, np.ndarray], mdp: TabularMDP,
                      num_samples: int, seed: Optional[int] = None,
                      feature: Union[None, TabularFeature, np.ndarray] = None) -> BayesianCoverageReport:
    """Monte Carlo over P* ~ prior with pi(P*) as comparator; class-based ratios need a discrete prior."""
    if num_samples < 10:
        raise InvalidParameterError("num_samples", num_samples, ">= 10")
    rng = np.random.default_rng(seed)
    rho_table = _pair_table(rho)
    class_models = getattr(getattr(prior, "model_class", None), "models", None)
    draws: Dict[str, List[float]] = {"C": []}
    if class_models is not None:
        draws.update({"C_dagger": [], "C_d0": []})
    if feature is not None:
        draws["rel_cond_number"] = []

    for _ in range(num_samples):
        draw = prior.sample(rng)
        mdp_true = mdp.with_transition(draw.model)
        comparator, _ = plan_optimal(mdp_true)
        draws["C"].append(concentrability(comparator, mdp_true, rho_table))
        if class_models is not None:
            model_class = FiniteModelClass(class_models, draw.model_id)
            draws["C_dagger"].append(refined_concentrability(model_class, comparator, mdp_true, rho_table))
            draws["C_d0"].append(initial_dist_concentrability(model_class, mdp_true, rho_table))
        if feature is not None:
            draws["rel_cond_number"].append(
                relative_condition_number(feature, occupancy(mdp_true, comparator), rho_table))
    return BayesianCoverageReport({name: np.array(values) for name, values in draws.items()})


def gaussian_l1_bound_check(mu1: np.ndarray, mu2: np.ndarray, zeta: float, grid: int = 801) -> Tuple[float, float]:
    """(integral of |N(mu1, zeta^2 I) - N(mu2, zeta^2 I)|, ||mu1 - mu2||_2 / zeta)

    1-D uses adaptive quadrature; 2-D uses a trapezoid rule on a `grid` x `grid` mesh.
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=float))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=float))
    if mu1.shape != mu2.shape:
        raise DimensionMismatchError("state_dim", mu1.shape, mu2.shape)
    if mu1.size > 2:
        raise InvalidParameterError("dimension", mu1.size, "1 or 2")
    if not zeta > 0:
        raise InvalidParameterError("zeta", zeta, "> 0")
    bound = float(np.linalg.norm(mu1 - mu2) / zeta)
    if np.array_equal(mu1, mu2):
        return 0.0, bound

    low = np.minimum(mu1, mu2) - INTEGRATION_WIDTH * zeta
    high = np.maximum(mu1, mu2) + INTEGRATION_WIDTH * zeta
    if mu1.size == 1:
        crossing = float((mu1[0] + mu2[0]) / 2)
        integrand = lambda x: abs(norm.pdf(x, mu1[0], zeta) - norm.pdf(x, mu2[0], zeta))
        left, _ = integrate.quad(integrand, low[0], crossing, epsrel=INTEGRATION_RTOL, limit=200)
        right, _ = integrate.quad(integrand, crossing, high[0], epsrel=INTEGRATION_RTOL, limit=200)
        return float(left + right), bound

    xs = np.linspace(low[0], high[0], grid)
    ys = np.linspace(low[1], high[1], grid)
    points = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
    covariance = zeta ** 2 * np.eye(2)
    density = np.abs(multivariate_normal(mu1, covariance).pdf(points) - multivariate_normal(mu2, covariance).pdf(points))
    l1 = integrate.trapezoid(integrate.trapezoid(density, ys, axis=1), xs)
    return float(l1), bound
