"""Pooled R² of full and reduced factor models.

Sums of squares are accumulated over every ``(date, security)`` cell of the
evaluation period before the ratio is formed, with each cell weighted by
``sqrt(mc)``.  The 90-day variant sums daily residuals and returns over
consecutive non-overlapping blocks of 90 trading days.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from factormodel.cross_section import (
    COUNTRY, INDUSTRY, DesignMatrix, FactorSubset, build_design, constraint_matrix, solve_weighted,
)
from factormodel.data import PanelDataset, effective_universe
from factormodel.errors import EvaluationError, SolverError
from factormodel.loadings import STYLE_NAMES, LoadingHistory

logger = logging.getLogger(__name__)

WINDOW_90D = 90
HORIZONS = {"1d": 1, "90d": WINDOW_90D}
METRICS = ("in_sample_1d", "in_sample_90d", "cv_1d", "cv_90d")
DEFAULT_FOLDS = 10

__all__ = [
    "CrossSections", "EvaluationReport", "FactorSubset", "assign_folds", "evaluate_cross_validated",
    "evaluate_in_sample", "evaluate_subset", "factor_group_report", "pooled_r2",
    "style_addition_report", "style_removal_report", "format_report",
]


def pooled_r2(weighted_residuals, weighted_returns) -> float:
    """``1 - SS_res / SS_tot`` with both sums taken over all cells at once.

    Inputs must already carry the ``sqrt(mc)`` weights and share one index
    layout; cells missing in either input are ignored.
    """
    ss_res, ss_tot = pooled_sums(weighted_residuals, weighted_returns)
    return r2_from_sums(ss_res, ss_tot)


def pooled_sums(weighted_residuals, weighted_returns) -> tuple[float, float]:
    res = np.asarray(weighted_residuals, dtype=float)
    ret = np.asarray(weighted_returns, dtype=float)
    if res.shape != ret.shape:
        raise EvaluationError(f"shape mismatch {res.shape} vs {ret.shape}")
    ok = np.isfinite(res) & np.isfinite(ret)
    return float(np.sum(res[ok] ** 2)), float(np.sum(ret[ok] ** 2))


def r2_from_sums(ss_res: float, ss_tot: float) -> float:
    if not ss_tot > 0:
        raise EvaluationError("degenerate returns: total sum of squares is zero")
    return 1.0 - ss_res / ss_tot


def horizon_sums(frame: pd.DataFrame, length: int) -> pd.DataFrame:
    """Sum rows over consecutive blocks of ``length`` rows; a trailing partial block is dropped.

    A security missing on some days of a block contributes its available
    days; one absent from the whole block stays missing.
    """
    if length == 1:
        return frame
    n_blocks = len(frame) // length
    if n_blocks == 0:
        raise EvaluationError(f"need at least {length} dates for the {length}-day horizon")
    values = frame.to_numpy()[: n_blocks * length].reshape(n_blocks, length, -1)
    present = np.isfinite(values).any(axis=1)
    sums = np.where(present, np.nansum(values, axis=1), np.nan)
    index = frame.index[: n_blocks * length : length]
    return pd.DataFrame(sums, index=index, columns=frame.columns)


def assign_folds(securities, k: int = DEFAULT_FOLDS, seed: int = 0) -> pd.Series:
    """Uniformly random fold per security; fold sizes differ by at most one."""
    if k < 2:
        raise ValueError("need at least two folds")
    securities = pd.Index(sorted(securities))
    rng = np.random.default_rng(seed)
    folds = np.empty(len(securities), dtype=int)
    folds[rng.permutation(len(securities))] = np.arange(len(securities)) % k
    return pd.Series(folds, index=securities, name="fold")


@dataclass
class CrossSections:
    """Full-model designs and returns for every fittable date of a period.

    Built once and reused by all subsets and folds.
    """

    dates: pd.DatetimeIndex
    designs: dict
    returns: dict
    skipped: list = field(default_factory=list)

    @classmethod
    def build(cls, panel: PanelDataset, loadings: LoadingHistory, start=None, end=None,
              threads: int = 1) -> CrossSections:
        dates = panel.dates[1:]
        if start is not None:
            dates = dates[dates >= pd.Timestamp(start)]
        if end is not None:
            dates = dates[dates <= pd.Timestamp(end)]

        def _one(day):
            matrix = loadings.at(day)
            if matrix is None:
                return None
            universe = effective_universe(panel, matrix, day)
            if len(universe) == 0:
                return None
            design = build_design(universe, matrix)
            return design, panel.returns.loc[day, design.securities].to_numpy(dtype=float)

        results = _map(_one, dates, threads)
        designs, returns, skipped = {}, {}, []
        for day, res in zip(dates, results):
            if res is None:
                skipped.append(day)
                continue
            designs[day], returns[day] = res
        if skipped:
            logger.info("%d dates without a usable cross section", len(skipped))
        # skipped dates stay on the calendar so 90-day blocks remain aligned
        return cls(dates=dates, designs=designs, returns=returns, skipped=skipped)

    @property
    def fitted_dates(self) -> pd.DatetimeIndex:
        return pd.DatetimeIndex([d for d in self.dates if d in self.designs])

    def securities(self) -> pd.Index:
        ids = set()
        for design in self.designs.values():
            ids.update(design.securities)
        return pd.Index(sorted(ids))


def _map(func, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(func, items))
    return [func(x) for x in items]


def _fold_coefficients(design: DesignMatrix, blocks: np.ndarray, train: np.ndarray,
                       y: np.ndarray) -> np.ndarray:
    """Coefficients fitted on ``train`` rows, zero for membership columns without training members."""
    X = design.values[train]
    keep = ~np.isin(blocks, (COUNTRY, INDUSTRY)) | (X.sum(axis=0) > 0)
    Xk, w = X[:, keep], design.weights[train]
    A, _ = constraint_matrix(Xk, w, blocks[keep])
    coef = np.zeros(design.shape[1])
    coef[keep] = solve_weighted(Xk, y[train], w, A).coefficients
    return coef


def _weighted_outcomes(sections: CrossSections, subset: FactorSubset, folds: pd.Series | None,
                       threads: int = 1):
    """sqrt(mc)-weighted residual and return frames over the period calendar."""
    k = 0 if folds is None else int(folds.max()) + 1

    def _one(day):
        if day not in sections.designs:
            return None
        design = sections.designs[day].select(subset)
        y = sections.returns[day]
        sw = np.sqrt(design.weights)
        resid = np.full(len(y), np.nan)
        failures = 0
        blocks = np.array([b for b, _ in design.columns])
        if folds is None:
            try:
                A, _ = constraint_matrix(design.values, design.weights, blocks)
                resid = solve_weighted(design.values, y, design.weights, A).residuals
            except SolverError as exc:
                logger.debug("%s: %s", day.date(), exc)
                return None, 1
        else:
            if len(y) < 2 * k:
                return None, 1
            fold_of = folds.reindex(design.securities).to_numpy()
            for f in range(k):
                test = fold_of == f
                if not test.any():
                    continue
                try:
                    coef = _fold_coefficients(design, blocks, ~test, y)
                except SolverError as exc:
                    logger.debug("%s fold %d: %s", day.date(), f, exc)
                    failures += 1
                    continue
                resid[test] = y[test] - design.values[test] @ coef
        return (design.securities, sw * resid, sw * np.where(np.isfinite(resid), y, np.nan)), failures

    results = _map(_one, sections.dates, threads)
    columns = sections.securities()
    pos = {sid: j for j, sid in enumerate(columns)}
    res = np.full((len(sections.dates), len(columns)), np.nan)
    ret = np.full_like(res, np.nan)
    failures = 0
    for i, out in enumerate(results):
        if out is None:
            continue
        payload, failed = out
        failures += failed
        if payload is None:
            continue
        ids, r_w, y_w = payload
        cols = np.fromiter((pos[s] for s in ids), dtype=int, count=len(ids))
        res[i, cols] = r_w
        ret[i, cols] = y_w
    frame = lambda values: pd.DataFrame(values, index=sections.dates, columns=columns)  # noqa: E731
    return frame(res), frame(ret), failures


@dataclass(frozen=True)
class EvaluationReport:
    subset: FactorSubset
    r2_in_sample_1d: float
    r2_in_sample_90d: float
    r2_cv_1d: float
    r2_cv_90d: float
    sums: dict
    n_dates: int
    n_folds: int
    n_failed: int

    def metrics(self) -> dict[str, float]:
        return {"in_sample_1d": self.r2_in_sample_1d, "in_sample_90d": self.r2_in_sample_90d,
                "cv_1d": self.r2_cv_1d, "cv_90d": self.r2_cv_90d}


def _horizon_r2(res: pd.DataFrame, ret: pd.DataFrame, horizon: str):
    length = HORIZONS[horizon]
    try:
        ss = pooled_sums(horizon_sums(res, length), horizon_sums(ret, length))
        return r2_from_sums(*ss), ss
    except EvaluationError as exc:
        logger.debug("%s horizon unavailable: %s", horizon, exc)
        return float("nan"), (float("nan"), float("nan"))


def evaluate_subset(sections: CrossSections, subset: FactorSubset, k: int = DEFAULT_FOLDS,
                    seed: int = 0, cross_validate: bool = True, threads: int = 1) -> EvaluationReport:
    """All four pooled R² variants of one factor subset."""
    values, sums = {}, {}
    res, ret, failed = _weighted_outcomes(sections, subset, None, threads)
    for h in HORIZONS:
        values[f"in_sample_{h}"], sums[f"in_sample_{h}"] = _horizon_r2(res, ret, h)
    if cross_validate:
        folds = assign_folds(sections.securities(), k, seed)
        res, ret, cv_failed = _weighted_outcomes(sections, subset, folds, threads)
        failed += cv_failed
        for h in HORIZONS:
            values[f"cv_{h}"], sums[f"cv_{h}"] = _horizon_r2(res, ret, h)
    else:
        for h in HORIZONS:
            values[f"cv_{h}"], sums[f"cv_{h}"] = float("nan"), (float("nan"), float("nan"))
    return EvaluationReport(
        subset=subset,
        r2_in_sample_1d=values["in_sample_1d"],
        r2_in_sample_90d=values["in_sample_90d"],
        r2_cv_1d=values["cv_1d"],
        r2_cv_90d=values["cv_90d"],
        sums=sums,
        n_dates=len(sections.designs),
        n_folds=k if cross_validate else 0,
        n_failed=failed,
    )


def _sections(panel, loadings, start, end, threads, sections):
    return sections if sections is not None else CrossSections.build(panel, loadings, start, end, threads)


def evaluate_in_sample(panel: PanelDataset, loadings: LoadingHistory, subset: FactorSubset,
                       horizon: str = "1d", *, start=None, end=None, threads: int = 1,
                       sections: CrossSections | None = None) -> float:
    """Pooled R² with each date fitted on its whole effective universe."""
    sections = _sections(panel, loadings, start, end, threads, sections)
    if not sections.designs:
        raise EvaluationError("no valid cross-section dates")
    res, ret, _ = _weighted_outcomes(sections, subset, None, threads)
    return pooled_r2(horizon_sums(res, HORIZONS[horizon]), horizon_sums(ret, HORIZONS[horizon]))


def evaluate_cross_validated(panel: PanelDataset, loadings: LoadingHistory, subset: FactorSubset,
                             horizon: str = "1d", k: int = DEFAULT_FOLDS, seed: int = 0, *,
                             start=None, end=None, threads: int = 1,
                             sections: CrossSections | None = None) -> float:
    """Pooled R² of held-out residuals from k-fold cross validation over securities."""
    sections = _sections(panel, loadings, start, end, threads, sections)
    if not sections.designs:
        raise EvaluationError("no valid cross-section dates")
    folds = assign_folds(sections.securities(), k, seed)
    res, ret, _ = _weighted_outcomes(sections, subset, folds, threads)
    return pooled_r2(horizon_sums(res, HORIZONS[horizon]), horizon_sums(ret, HORIZONS[horizon]))


def _report(rows: list[tuple[str, FactorSubset]], sections, k, seed, cross_validate, threads) -> pd.DataFrame:
    records = {}
    for label, subset in rows:
        records[label] = evaluate_subset(sections, subset, k, seed, cross_validate, threads).metrics()
    out = pd.DataFrame.from_dict(records, orient="index")[list(METRICS)]
    out.index.name = "model"
    return out


def factor_group_report(panel: PanelDataset, loadings: LoadingHistory, *, k: int = DEFAULT_FOLDS,
                        seed: int = 0, start=None, end=None, threads: int = 1,
                        cross_validate: bool = True, sections: CrossSections | None = None) -> pd.DataFrame:
    """Market only, then market plus all styles, all countries or all industries."""
    sections = _sections(panel, loadings, start, end, threads, sections)
    rows = [
        ("Market only", FactorSubset.market_only()),
        ("Market + Style", FactorSubset(styles=STYLE_NAMES, include_countries=False, include_industries=False)),
        ("Market + Country", FactorSubset(styles=(), include_countries=True, include_industries=False)),
        ("Market + Industry", FactorSubset(styles=(), include_countries=False, include_industries=True)),
    ]
    return _report(rows, sections, k, seed, cross_validate, threads)


def style_addition_report(panel: PanelDataset, loadings: LoadingHistory, *, k: int = DEFAULT_FOLDS,
                          seed: int = 0, start=None, end=None, threads: int = 1,
                          cross_validate: bool = True, sections: CrossSections | None = None) -> pd.DataFrame:
    """Market, countries and industries, plus one style factor at a time."""
    sections = _sections(panel, loadings, start, end, threads, sections)
    rows = [("No style factors", FactorSubset(styles=()))]
    rows += [(s, FactorSubset(styles=(s,))) for s in STYLE_NAMES]
    return _report(rows, sections, k, seed, cross_validate, threads)


def style_removal_report(panel: PanelDataset, loadings: LoadingHistory, *, k: int = DEFAULT_FOLDS,
                         seed: int = 0, start=None, end=None, threads: int = 1,
                         cross_validate: bool = True, sections: CrossSections | None = None) -> pd.DataFrame:
    """Full model, then the full model without one style factor at a time."""
    sections = _sections(panel, loadings, start, end, threads, sections)
    full = FactorSubset.full()
    rows = [("All factors", full)] + [(f"-{s}", full.without_style(s)) for s in STYLE_NAMES]
    return _report(rows, sections, k, seed, cross_validate, threads)


def format_report(report: pd.DataFrame, decimals: int = 3) -> str:
    """Aligned plain-text table with values rounded for display."""
    header = ["model", *report.columns]
    body = [[str(idx), *(f"{v:.{decimals}f}" if v == v else "n/a" for v in row)]
            for idx, row in zip(report.index, report.to_numpy())]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(r))
             for r in [header, *body]]
    return "\n".join(lines)
