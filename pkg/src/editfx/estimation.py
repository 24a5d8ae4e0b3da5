"""Propensity fitting, stabilized capped weights, and per-cell estimates.

The pipeline per cell: fit an L2-penalized logistic model of treatment
on pre-edit covariates by iteratively reweighted least squares, form
stabilized inverse-probability weights capped at 10, then take the
weighted treated-minus-control mean gain. The unweighted difference and
its gap to the weighted one are reported alongside.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .design import AnalysisUnit, CellData, TestCell, TestFamily
from .errors import ConfigError, DegenerateCellError, PositivityError, SchemaError

RIDGE_LAMBDA = 1e-4
PROB_CLIP = 1e-6
WEIGHT_CAP = 10.0
MAX_ITERATIONS = 100
COEF_TOLERANCE = 1e-8


@dataclass(frozen=True)
class PropensityModel:
    intercept: float
    coefficients: dict[str, float]
    schema: tuple[str, ...]
    converged: bool
    iterations: int

    def __post_init__(self):
        if set(self.coefficients) != set(self.schema):
            raise SchemaError("coefficient names must match the schema")


@dataclass(frozen=True)
class WeightVector:
    weights: np.ndarray
    raw: np.ndarray
    cap_hits: int
    cap: float = WEIGHT_CAP


@dataclass(frozen=True)
class CellEstimate:
    view: str
    feature: str
    task_group: str
    acmgd_sipw: float
    acmgd_naive: float
    n_treated: int
    n_control: int
    cap_hits: int

    @property
    def confounding_magnitude(self) -> float:
        return abs(self.acmgd_sipw - self.acmgd_naive)

    @property
    def cell_id(self) -> str:
        return f"{self.view}:{self.feature}:{self.task_group}"


def _penalized_loglik(
    design: np.ndarray, y: np.ndarray, beta: np.ndarray, ridge: float
) -> float:
    eta = design @ beta
    # log sigma(eta) summed over y=1, log(1-sigma) over y=0, stably.
    loglik = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    return loglik - 0.5 * ridge * float(np.sum(beta[1:] ** 2))


def irls_logistic(
    matrix: np.ndarray, y: np.ndarray, ridge: float = RIDGE_LAMBDA
) -> tuple[np.ndarray, bool, int]:
    """Maximize the ridge-penalized Bernoulli log-likelihood.

    The intercept is unpenalized. Newton steps are halved until the
    objective does not decrease, so the ascent is monotone; with ridge
    on the slopes the optimum is finite even for separable data.
    Returns (beta with intercept first, converged flag, iterations).
    """
    if not np.all(np.isfinite(matrix)):
        raise SchemaError("design matrix contains non-finite values")
    n = matrix.shape[0]
    design = np.hstack([np.ones((n, 1)), matrix])
    p = design.shape[1]
    penalty = np.full(p, ridge)
    penalty[0] = 0.0
    rate = float(np.mean(y))
    beta = np.zeros(p)
    beta[0] = np.log(rate / (1.0 - rate)) if 0.0 < rate < 1.0 else 0.0
    objective = _penalized_loglik(design, y, beta, ridge)
    converged = False
    iterations = 0
    for iterations in range(1, MAX_ITERATIONS + 1):
        mu = expit(design @ beta)
        grad = design.T @ (y - mu) - penalty * beta
        w = np.clip(mu * (1.0 - mu), 1e-10, None)
        hessian = (design * w[:, None]).T @ design
        hessian[np.diag_indices_from(hessian)] += penalty
        try:
            step = np.linalg.solve(hessian, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hessian, grad, rcond=None)[0]
        scale = 1.0
        for _ in range(30):
            candidate = beta + scale * step
            new_objective = _penalized_loglik(design, y, candidate, ridge)
            if new_objective >= objective - 1e-12:
                break
            scale *= 0.5
        beta = beta + scale * step
        objective = _penalized_loglik(design, y, beta, ridge)
        if float(np.max(np.abs(scale * step))) < COEF_TOLERANCE:
            converged = True
            break
    return beta, converged, iterations


def penalized_gradient(
    matrix: np.ndarray, y: np.ndarray, beta: np.ndarray, ridge: float = RIDGE_LAMBDA
) -> np.ndarray:
    """Gradient of the penalized log-likelihood; zero at the optimum."""
    n = matrix.shape[0]
    design = np.hstack([np.ones((n, 1)), matrix])
    penalty = np.full(design.shape[1], ridge)
    penalty[0] = 0.0
    mu = expit(design @ beta)
    return design.T @ (y - mu) - penalty * beta


def fit_propensity(units: list[AnalysisUnit], ridge: float = RIDGE_LAMBDA) -> PropensityModel:
    """Fit treatment ~ pre-edit covariates on the given fitting population."""
    data = CellData(units)
    return fit_propensity_packed(data, ridge=ridge)


def fit_propensity_packed(
    data: CellData, idx: np.ndarray | None = None, ridge: float = RIDGE_LAMBDA
) -> PropensityModel:
    t = data.treatment if idx is None else data.treatment[idx]
    if t.min() == t.max():
        raise PositivityError("all units share one arm; propensity is unidentified")
    matrix, names = data.encode_with_names(idx)
    beta, converged, iterations = irls_logistic(matrix, t.astype(np.float64), ridge)
    return PropensityModel(
        intercept=float(beta[0]),
        coefficients={name: float(b) for name, b in zip(names, beta[1:])},
        schema=tuple(names),
        converged=converged,
        iterations=iterations,
    )


def predict_probabilities(model: PropensityModel, matrix: np.ndarray) -> np.ndarray:
    """Fitted treatment probabilities, clipped away from 0 and 1."""
    beta = np.array([model.intercept] + [model.coefficients[c] for c in model.schema])
    eta = beta[0] + matrix @ beta[1:]
    return np.clip(expit(eta), PROB_CLIP, 1.0 - PROB_CLIP)


def stabilized_weights(
    treatment: np.ndarray,
    probabilities: np.ndarray,
    marginal_rate: float | None = None,
    cap: float = WEIGHT_CAP,
) -> WeightVector:
    """Stabilized inverse-probability weights, capped.

    w_i = T_i * pbar / e_i + (1 - T_i) * (1 - pbar) / (1 - e_i), where
    pbar defaults to the treated fraction of the units given (the
    fitting population's marginal rate).
    """
    t = np.asarray(treatment, dtype=np.float64)
    e = np.asarray(probabilities, dtype=np.float64)
    pbar = float(np.mean(t)) if marginal_rate is None else float(marginal_rate)
    raw = t * (pbar / e) + (1.0 - t) * ((1.0 - pbar) / (1.0 - e))
    weights = np.minimum(raw, cap)
    return WeightVector(weights=weights, raw=raw, cap_hits=int(np.sum(raw > cap)), cap=cap)


def weighted_difference(
    treatment: np.ndarray, outcome: np.ndarray, weights: np.ndarray
) -> float:
    """Weighted treated-minus-control mean outcome."""
    t = np.asarray(treatment, dtype=np.float64)
    y = np.asarray(outcome, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    treated_sum = float(np.sum(w * t))
    control_sum = float(np.sum(w * (1.0 - t)))
    if treated_sum <= 0.0 or control_sum <= 0.0:
        raise DegenerateCellError("zero weight mass in one arm")
    treated_mean = float(np.sum(w * t * y)) / treated_sum
    control_mean = float(np.sum(w * (1.0 - t) * y)) / control_sum
    return treated_mean - control_mean


def estimate_cell(
    cell: TestCell,
    data: CellData | None = None,
    ridge: float = RIDGE_LAMBDA,
    scope_model: PropensityModel | None = None,
    scope_rate: float | None = None,
) -> CellEstimate:
    """Point estimates for one cell.

    By default the propensity model is fitted on the cell itself. A
    model fitted on a wider population (and that population's marginal
    rate) can be supplied instead for sensitivity analysis.
    """
    if data is None:
        data = CellData(cell.units)
    t = data.treatment.astype(np.float64)
    n_treated = int(t.sum())
    n_control = int(len(t) - t.sum())
    if n_treated == 0 or n_control == 0:
        raise PositivityError(f"cell {cell.cell_id} has an empty arm")
    if scope_model is None:
        model = fit_propensity_packed(data, ridge=ridge)
        probabilities = predict_probabilities(model, data.encode())
        rate = None
    else:
        probabilities = predict_probabilities(scope_model, _encode_for(scope_model, data))
        rate = scope_rate
    wv = stabilized_weights(t, probabilities, marginal_rate=rate)
    sipw = weighted_difference(t, data.outcome, wv.weights)
    naive = weighted_difference(t, data.outcome, np.ones_like(t))
    return CellEstimate(
        view=cell.spec.view,
        feature=cell.spec.feature_name,
        task_group=cell.task_group,
        acmgd_sipw=sipw,
        acmgd_naive=naive,
        n_treated=n_treated,
        n_control=n_control,
        cap_hits=wv.cap_hits,
    )


def _encode_for(model: PropensityModel, data: CellData) -> np.ndarray:
    """Encode a cell against a wider model's column schema.

    Numeric z-scores still come from the cell (the model's training
    scaling is not recoverable from coefficients alone and the contract
    is schema alignment, not scale replay); dummy columns are matched by
    name, absent levels become zero columns.
    """
    matrix, names = data.encode_with_names()
    by_name = {name: matrix[:, k] for k, name in enumerate(names)}
    n = matrix.shape[0]
    aligned = np.zeros((n, len(model.schema)))
    for k, name in enumerate(model.schema):
        if name in by_name:
            aligned[:, k] = by_name[name]
    return aligned


@dataclass
class EstimateBundle:
    estimates: list[CellEstimate]
    skipped: list[tuple[str, str]] = field(default_factory=list)
    family_confounding: dict[str, float] = field(default_factory=dict)


def estimate_all(
    families: list[TestFamily],
    ridge: float = RIDGE_LAMBDA,
    scope: str = "cell",
    workers: int = 1,
) -> EstimateBundle:
    """Estimates for every cell of every family, in sorted cell order.

    scope="cell" fits the propensity per cell; scope="pooled" fits one
    model per feature on all of its groups pooled and reuses it (with the
    pooled marginal rate) inside each cell. Cells that fail positivity or
    degenerate are recorded as skipped, not raised. Output is identical
    for any worker count.
    """
    if scope not in ("cell", "pooled"):
        raise ConfigError("scope must be 'cell' or 'pooled'")
    bundle = EstimateBundle(estimates=[])
    for family in families:
        if not family.cells:
            raise ConfigError(f"family '{family.name}' has no cells")
        cells = sorted(family.cells, key=lambda c: (c.spec.feature_name, c.task_group))
        pooled: dict[str, tuple[PropensityModel, float]] = {}
        if scope == "pooled":
            by_feature: dict[str, list[AnalysisUnit]] = {}
            for cell in cells:
                by_feature.setdefault(cell.spec.feature_name, []).extend(cell.units)
            for feature, units in by_feature.items():
                data = CellData(units)
                pooled[feature] = (
                    fit_propensity_packed(data, ridge=ridge),
                    float(data.treatment.mean()),
                )

        def one(cell: TestCell) -> CellEstimate:
            model, rate = pooled.get(cell.spec.feature_name, (None, None))
            return estimate_cell(cell, ridge=ridge, scope_model=model, scope_rate=rate)

        results: list[CellEstimate | tuple[str, str]] = []
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(one, cell) for cell in cells]
                for cell, future in zip(cells, futures):
                    try:
                        results.append(future.result())
                    except (PositivityError, DegenerateCellError) as exc:
                        results.append((cell.cell_id, str(exc)))
        else:
            for cell in cells:
                try:
                    results.append(one(cell))
                except (PositivityError, DegenerateCellError) as exc:
                    results.append((cell.cell_id, str(exc)))
        gaps = []
        for item in results:
            if isinstance(item, CellEstimate):
                bundle.estimates.append(item)
                gaps.append(item.confounding_magnitude)
            else:
                bundle.skipped.append(item)
        if gaps:
            bundle.family_confounding[family.name] = float(np.mean(gaps))
    return bundle
