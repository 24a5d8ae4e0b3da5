"""Block-bootstrap uncertainty, BH-FDR correction, and evidence tiers.

Standard errors come from resampling whole (dataset, backbone) blocks
with replacement and rerunning the estimator per resample; p-values from
a two-sided normal approximation by default. BH step-up runs within one
family at a time, never pooled across families.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .design import CellData, TestCell, TestFamily
from .errors import ConfigError, DegenerateCellError, PositivityError, UnstableCellError
from .estimation import (
    fit_propensity_packed,
    predict_probabilities,
    stabilized_weights,
    weighted_difference,
)

TIER_BH = "bh_significant"
TIER_UNCORRECTED = "uncorrected_significant"
TIER_NONE = "none"

TIER_MARKERS = {TIER_BH: "★", TIER_UNCORRECTED: "*", TIER_NONE: ""}


@dataclass(frozen=True)
class BootstrapConfig:
    resamples: int = 500
    seed: int = 0
    refit: bool = True
    percentile_p: bool = False

    def __post_init__(self):
        if self.resamples < 2:
            raise ConfigError("resamples must be >= 2")


@dataclass(frozen=True)
class BootstrapResult:
    estimate: float
    se: float
    p_value: float
    resample_estimates: np.ndarray
    valid_resamples: int
    discarded: int


@dataclass(frozen=True)
class InferenceResult:
    view: str
    feature: str
    task_group: str
    estimate: float
    se: float
    p_value: float
    q_value: float
    tier: str
    valid_resamples: int

    @property
    def marker(self) -> str:
        return TIER_MARKERS[self.tier]

    @property
    def cell_id(self) -> str:
        return f"{self.view}:{self.feature}:{self.task_group}"


def derive_cell_seed(master_seed: int, view: str, feature: str, group: str) -> int:
    """Stable per-cell seed so results do not depend on scheduling order."""
    digest = hashlib.sha256(f"{master_seed}|{view}|{feature}|{group}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _sipw_estimate(data: CellData, idx: np.ndarray) -> float:
    t = data.treatment[idx].astype(np.float64)
    model = fit_propensity_packed(data, idx)
    probabilities = predict_probabilities(model, data.encode(idx))
    wv = stabilized_weights(t, probabilities)
    return weighted_difference(t, data.outcome[idx], wv.weights)


def _naive_estimate(data: CellData, idx: np.ndarray) -> float:
    t = data.treatment[idx].astype(np.float64)
    return weighted_difference(t, data.outcome[idx], np.ones_like(t))


def block_bootstrap(
    cell: TestCell,
    cfg: BootstrapConfig,
    recipe: str = "sipw",
    mode: str = "block",
    data: CellData | None = None,
) -> BootstrapResult:
    """Bootstrap one cell's estimate.

    recipe "sipw" reruns propensity fit, weighting, and the weighted
    difference per resample (or reuses the point-estimate weights when
    cfg.refit is false); "naive" bootstraps the unweighted difference.
    mode "block" resamples whole blocks with replacement, keeping the
    original block count; mode "iid" resamples units, for comparison
    only. Resamples that empty an arm are discarded and counted.
    """
    if recipe not in ("sipw", "naive"):
        raise ConfigError("recipe must be 'sipw' or 'naive'")
    if mode not in ("block", "iid"):
        raise ConfigError("mode must be 'block' or 'iid'")
    if data is None:
        data = CellData(cell.units)
    n_blocks = len(data.blocks)
    if mode == "block" and n_blocks < 2:
        raise ConfigError("block bootstrap needs at least 2 blocks")

    point_weights: np.ndarray | None = None
    if recipe == "sipw":
        if cfg.refit:
            estimator = _sipw_estimate
        else:
            t_full = data.treatment.astype(np.float64)
            model = fit_propensity_packed(data)
            probabilities = predict_probabilities(model, data.encode())
            point_weights = stabilized_weights(t_full, probabilities).weights

            def estimator(d: CellData, idx: np.ndarray) -> float:
                t = d.treatment[idx].astype(np.float64)
                return weighted_difference(t, d.outcome[idx], point_weights[idx])

        point = _sipw_estimate(data, np.arange(data.n))
    else:
        estimator = _naive_estimate
        point = _naive_estimate(data, np.arange(data.n))

    estimates = np.empty(cfg.resamples)
    valid = 0
    discarded = 0
    for r in range(cfg.resamples):
        rng = np.random.default_rng([cfg.seed, r])
        if mode == "block":
            drawn = rng.integers(0, n_blocks, size=n_blocks)
            idx = np.concatenate([data.block_members[b] for b in drawn])
        else:
            idx = rng.integers(0, data.n, size=data.n)
        t = data.treatment[idx]
        if t.min() == t.max():
            discarded += 1
            continue
        try:
            estimates[valid] = estimator(data, idx)
        except (PositivityError, DegenerateCellError):
            discarded += 1
            continue
        valid += 1
    if valid < cfg.resamples / 2:
        raise UnstableCellError(
            f"only {valid} of {cfg.resamples} resamples were valid"
        )
    kept = estimates[:valid]
    se = float(np.std(kept, ddof=1))
    if cfg.percentile_p:
        frac_low = float(np.mean(kept <= 0.0))
        frac_high = float(np.mean(kept >= 0.0))
        p_value = min(1.0, 2.0 * min(frac_low, frac_high))
    elif se == 0.0:
        p_value = 1.0 if point == 0.0 else 0.0
    else:
        p_value = math.erfc(abs(point / se) / math.sqrt(2.0))
    return BootstrapResult(
        estimate=point,
        se=se,
        p_value=p_value,
        resample_estimates=kept,
        valid_resamples=valid,
        discarded=discarded,
    )


def bh_fdr(p_values, alpha: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Benjamini-Hochberg step-up over one family of p-values.

    Rejects the smallest i* p-values where i* is the largest rank i with
    p_(i) <= i*alpha/m. q_(i) = min over j >= i of m*p_(j)/j, clamped to
    1, returned in the input order.
    """
    p = np.asarray(p_values, dtype=np.float64)
    if p.size == 0:
        raise ConfigError("bh_fdr needs at least one p-value")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ConfigError("p-values must lie in [0, 1]")
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must lie in (0, 1)")
    m = p.size
    order = np.argsort(p, kind="stable")
    sorted_p = p[order]
    ranks = np.arange(1, m + 1)
    passing = np.flatnonzero(sorted_p <= ranks * alpha / m)
    reject_sorted = np.zeros(m, dtype=bool)
    if passing.size:
        reject_sorted[: passing[-1] + 1] = True
    q_sorted = np.minimum.accumulate((m * sorted_p / ranks)[::-1])[::-1]
    q_sorted = np.minimum(q_sorted, 1.0)
    q = np.empty(m)
    reject = np.empty(m, dtype=bool)
    q[order] = q_sorted
    reject[order] = reject_sorted
    return q, reject


def tier_of(p_value: float, q_value: float, alpha: float = 0.05) -> str:
    if q_value < alpha:
        return TIER_BH
    if p_value < alpha:
        return TIER_UNCORRECTED
    return TIER_NONE


def infer_family(
    family: TestFamily,
    master_seed: int = 0,
    resamples: int = 500,
    alpha: float = 0.05,
    refit: bool = True,
    percentile_p: bool = False,
    workers: int = 1,
) -> tuple[list[InferenceResult], list[tuple[str, str]]]:
    """Bootstrap every cell of one family, then BH-correct within it.

    Cells whose bootstrap is unstable are skipped and do not count
    toward the family's m. Per-cell seeds derive from the master seed
    and the cell identity, so any worker count gives identical output.
    """
    cells = sorted(family.cells, key=lambda c: (c.spec.feature_name, c.task_group))

    def one(cell: TestCell) -> BootstrapResult:
        cfg = BootstrapConfig(
            resamples=resamples,
            seed=derive_cell_seed(
                master_seed, cell.spec.view, cell.spec.feature_name, cell.task_group
            ),
            refit=refit,
            percentile_p=percentile_p,
        )
        return block_bootstrap(cell, cfg)

    outcomes: list[BootstrapResult | tuple[str, str]] = []
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(one, cell) for cell in cells]
            for cell, future in zip(cells, futures):
                try:
                    outcomes.append(future.result())
                except (ConfigError, UnstableCellError, PositivityError) as exc:
                    outcomes.append((cell.cell_id, str(exc)))
    else:
        for cell in cells:
            try:
                outcomes.append(one(cell))
            except (ConfigError, UnstableCellError, PositivityError) as exc:
                outcomes.append((cell.cell_id, str(exc)))

    tested = [
        (cell, res) for cell, res in zip(cells, outcomes) if isinstance(res, BootstrapResult)
    ]
    skipped = [res for res in outcomes if not isinstance(res, BootstrapResult)]
    results: list[InferenceResult] = []
    if tested:
        q_values, _ = bh_fdr([res.p_value for _, res in tested], alpha=alpha)
        for (cell, res), q in zip(tested, q_values):
            results.append(
                InferenceResult(
                    view=cell.spec.view,
                    feature=cell.spec.feature_name,
                    task_group=cell.task_group,
                    estimate=res.estimate,
                    se=res.se,
                    p_value=res.p_value,
                    q_value=float(q),
                    tier=tier_of(res.p_value, float(q), alpha),
                    valid_resamples=res.valid_resamples,
                )
            )
    return results, skipped


def infer_all(
    families: list[TestFamily],
    master_seed: int = 0,
    resamples: int = 500,
    alpha: float = 0.05,
    refit: bool = True,
    percentile_p: bool = False,
    workers: int = 1,
) -> tuple[list[InferenceResult], list[tuple[str, str]]]:
    """infer_family over every family; BH is never pooled across them."""
    results: list[InferenceResult] = []
    skipped: list[tuple[str, str]] = []
    for family in families:
        family_results, family_skipped = infer_family(
            family,
            master_seed=master_seed,
            resamples=resamples,
            alpha=alpha,
            refit=refit,
            percentile_p=percentile_p,
            workers=workers,
        )
        results.extend(family_results)
        skipped.extend(family_skipped)
    return results, skipped
