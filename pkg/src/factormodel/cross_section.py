"""Daily cross-sectional regression with country/industry zero-sum constraints.

Returns are regressed on ``[market | styles | countries | industries]`` with
weights proportional to market cap.  The cap-weighted country and industry
factor returns are constrained to sum to zero, which the solver handles by
reparameterizing the coefficients in a basis of the constraint null space.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from factormodel.data import EffectiveUniverse, PanelDataset, effective_universe
from factormodel.errors import SolverError
from factormodel.loadings import STYLE_NAMES, LoadingHistory, LoadingMatrix

logger = logging.getLogger(__name__)

MARKET = "market"
STYLE = "style"
COUNTRY = "country"
INDUSTRY = "industry"
BLOCKS = (MARKET, STYLE, COUNTRY, INDUSTRY)

Column = tuple[str, str]


@dataclass(frozen=True)
class FactorSubset:
    """Which factor blocks enter a (possibly reduced) model."""

    include_market: bool = True
    styles: tuple[str, ...] = STYLE_NAMES
    include_countries: bool = True
    include_industries: bool = True
    label: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "styles", tuple(self.styles))
        unknown = set(self.styles) - set(STYLE_NAMES)
        if unknown:
            raise ValueError(f"unknown style factors {sorted(unknown)}")
        others = bool(self.styles) or self.include_countries or self.include_industries
        if others and not self.include_market:
            raise ValueError("the market factor is required whenever other factors are included")
        if not (others or self.include_market):
            raise ValueError("empty factor subset")

    @classmethod
    def full(cls, label: str = "All factors") -> FactorSubset:
        return cls(label=label)

    @classmethod
    def market_only(cls) -> FactorSubset:
        return cls(styles=(), include_countries=False, include_industries=False, label="Market only")

    def without_style(self, name: str) -> FactorSubset:
        return FactorSubset(self.include_market, tuple(s for s in self.styles if s != name),
                            self.include_countries, self.include_industries, label=f"-{name}")


@dataclass(frozen=True)
class DesignMatrix:
    """Rows are securities, columns are ``(block, name)`` pairs in fixed order."""

    date: pd.Timestamp
    securities: pd.Index
    columns: tuple[Column, ...]
    values: np.ndarray
    weights: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def block_index(self, block: str) -> np.ndarray:
        return np.array([i for i, (b, _) in enumerate(self.columns) if b == block], dtype=int)

    def select(self, subset: FactorSubset) -> DesignMatrix:
        """Keep only the columns belonging to ``subset``."""
        keep = []
        styles = set(subset.styles)
        for i, (block, name) in enumerate(self.columns):
            if (
                (block == MARKET and subset.include_market)
                or (block == STYLE and name in styles)
                or (block == COUNTRY and subset.include_countries)
                or (block == INDUSTRY and subset.include_industries)
            ):
                keep.append(i)
        return DesignMatrix(self.date, self.securities, tuple(self.columns[i] for i in keep),
                            self.values[:, keep], self.weights)

    def take(self, rows) -> DesignMatrix:
        """Row subset; membership columns left without members are dropped."""
        rows = np.asarray(rows)
        values = self.values[rows]
        keep = [
            i for i, (block, _) in enumerate(self.columns)
            if block not in (COUNTRY, INDUSTRY) or values[:, i].sum() > 0
        ]
        return DesignMatrix(self.date, self.securities[rows], tuple(self.columns[i] for i in keep),
                            values[:, keep], self.weights[rows])


@dataclass(frozen=True)
class ConstraintSet:
    """Linear equalities ``matrix @ f == 0``, one row per constrained block."""

    matrix: np.ndarray
    blocks: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.blocks)


@dataclass(frozen=True)
class CrossSectionFit:
    date: pd.Timestamp
    factor_returns: pd.Series
    residuals: pd.Series
    weighted_rss: float
    residual_scale: float
    n_obs: int
    rank: int
    n_free: int
    condition: float

    @property
    def rank_deficient(self) -> bool:
        return self.rank < self.n_free

    def block(self, block: str) -> pd.Series:
        """Factor returns of one block, indexed by factor name."""
        fr = self.factor_returns
        mask = fr.index.get_level_values(0) == block
        out = fr[mask]
        out.index = out.index.get_level_values(1)
        return out

    @property
    def market_return(self) -> float:
        return float(self.factor_returns[(MARKET, MARKET)])


def build_design(
    universe: EffectiveUniverse,
    loadings: LoadingMatrix,
    subset: FactorSubset | None = None,
) -> DesignMatrix:
    """Design matrix of one date's effective universe.

    Only countries and industries with nonzero total membership get columns,
    in sorted label order.
    """
    subset = subset or FactorSubset.full()
    ids = universe.members
    if len(ids) == 0:
        raise SolverError(f"empty universe on {universe.date.date()}")
    n = len(ids)
    blocks, columns = [], []
    if subset.include_market:
        blocks.append(np.ones((n, 1)))
        columns.append((MARKET, MARKET))
    if subset.styles:
        blocks.append(loadings.style.loc[ids, list(subset.styles)].to_numpy(dtype=float))
        columns.extend((STYLE, s) for s in subset.styles)
    for block, include, frame in ((COUNTRY, subset.include_countries, loadings.country),
                                  (INDUSTRY, subset.include_industries, loadings.industry)):
        if not include:
            continue
        values = frame.loc[ids].fillna(0.0)
        values = values.loc[:, values.sum(axis=0) > 0]
        values = values.reindex(columns=sorted(values.columns))
        blocks.append(values.to_numpy(dtype=float))
        columns.extend((block, str(c)) for c in values.columns)
    X = np.hstack(blocks)
    if not np.isfinite(X).all():
        raise SolverError(f"non-finite loadings in design on {universe.date.date()}")
    w = universe.market_caps.reindex(ids).to_numpy(dtype=float)
    return DesignMatrix(pd.Timestamp(universe.date), ids, tuple(columns), X, w)


def constraint_matrix(values: np.ndarray, weights: np.ndarray, blocks) -> tuple[np.ndarray, tuple[str, ...]]:
    """One zero-sum row per country/industry block present among ``blocks`` (one entry per column)."""
    blocks = np.asarray(blocks)
    rows, names = [], []
    for block in (COUNTRY, INDUSTRY):
        idx = np.flatnonzero(blocks == block)
        if len(idx) == 0:
            continue
        row = np.zeros(values.shape[1])
        row[idx] = weights @ values[:, idx]
        rows.append(row)
        names.append(block)
    matrix = np.vstack(rows) if rows else np.zeros((0, values.shape[1]))
    return matrix, tuple(names)


def constraints_for(design: DesignMatrix) -> ConstraintSet:
    """Cap-weighted zero-sum constraints for the country and industry blocks present."""
    matrix, names = constraint_matrix(design.values, design.weights, [b for b, _ in design.columns])
    return ConstraintSet(matrix, names)


def _normalized_rows(matrix: np.ndarray) -> np.ndarray:
    if len(matrix) == 0:
        return matrix
    norms = np.linalg.norm(matrix, axis=1)
    if not (norms > 0).all():
        raise SolverError("constraint with zero coefficients")
    return matrix / norms[:, None]


def null_space_basis(constraints: np.ndarray, p: int) -> np.ndarray:
    """Orthonormal ``p x (p - m)`` basis of ``{f : constraints @ f = 0}`` via complete QR."""
    m = len(constraints)
    if m == 0:
        return np.eye(p)
    q, _ = np.linalg.qr(_normalized_rows(constraints).T, mode="complete")
    return q[:, m:]


@dataclass(frozen=True)
class WeightedSolution:
    """Array-level result of :func:`solve_weighted`."""

    coefficients: np.ndarray
    residuals: np.ndarray
    weighted_rss: float
    rank: int
    n_free: int
    condition: float


def solve_weighted(X: np.ndarray, y: np.ndarray, w: np.ndarray, constraints: np.ndarray) -> WeightedSolution:
    """Minimize ``sum_k w_k (y_k - X_k f)^2`` subject to ``constraints @ f = 0``.

    Rows are scaled by ``sqrt(w_k / sum(w))`` and the problem is solved in
    the null-space coordinates ``f = Z g``.  Rank deficiency beyond the
    constraints is resolved by the minimum-norm ``g``.

    Raises
    ------
    SolverError
        On non-finite input, non-positive weights, fewer observations than
        free parameters, or a numerically zero reduced design.
    """
    n, p = X.shape
    if y.shape != (n,) or not np.isfinite(y).all():
        raise SolverError("returns must be finite and aligned with the design rows")
    if not ((w > 0) & np.isfinite(w)).all():
        raise SolverError("regression weights must be positive")
    n_free = p - len(constraints)
    if n < n_free:
        raise SolverError(f"insufficient cross section: {n} observations for {n_free} free parameters")

    sw = np.sqrt(w / w.sum())
    Z = null_space_basis(constraints, p)
    B = (X * sw[:, None]) @ Z
    g, _, rank, sv = np.linalg.lstsq(B, y * sw, rcond=None)
    if rank == 0:
        raise SolverError("reduced design is numerically zero", condition=float("inf"))
    condition = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    f = Z @ g
    resid = y - X @ f
    return WeightedSolution(f, resid, float(np.sum(w * resid**2)), int(rank), n_free, condition)


def solve_cross_section(
    design: DesignMatrix,
    returns,
    constraints: ConstraintSet | None = None,
) -> CrossSectionFit:
    """Constrained cap-weighted least squares for one date.

    Minimizes ``sum_k mc_k (r_k - X_k f)^2`` subject to ``constraints``
    (by default the zero-sum rows of :func:`constraints_for`); see
    :func:`solve_weighted` for the method.  Rank deficiency is visible
    through ``rank`` and ``condition``.

    Raises
    ------
    SolverError
        If there are fewer observations than free parameters, or the
        reduced design is numerically zero.
    """
    if constraints is None:
        constraints = constraints_for(design)
    if isinstance(returns, pd.Series):
        y = returns.reindex(design.securities).to_numpy(dtype=float)
    else:
        y = np.asarray(returns, dtype=float)
    sol = solve_weighted(design.values, y, design.weights, constraints.matrix)
    n = design.shape[0]
    dof = n - sol.rank
    index = pd.MultiIndex.from_tuples(design.columns, names=["factor_type", "factor_name"])
    return CrossSectionFit(
        date=design.date,
        factor_returns=pd.Series(sol.coefficients, index=index, name="factor_return"),
        residuals=pd.Series(sol.residuals, index=design.securities, name="residual"),
        weighted_rss=sol.weighted_rss,
        residual_scale=sol.weighted_rss / dof if dof > 0 else float("nan"),
        n_obs=n,
        rank=sol.rank,
        n_free=sol.n_free,
        condition=sol.condition,
    )


def solve_kkt(design: DesignMatrix, returns, constraints: ConstraintSet | None = None) -> np.ndarray:
    """Reference solution from the explicit Lagrangian (KKT) system.

    Independent of the null-space route; used to cross-check it on small
    problems with a unique solution.
    """
    if constraints is None:
        constraints = constraints_for(design)
    X = design.values
    y = (returns.reindex(design.securities).to_numpy(dtype=float)
         if isinstance(returns, pd.Series) else np.asarray(returns, dtype=float))
    w = design.weights / design.weights.sum()
    A = _normalized_rows(constraints.matrix)
    m, p = A.shape
    XtW = X.T * w
    kkt = np.zeros((p + m, p + m))
    kkt[:p, :p] = XtW @ X
    kkt[:p, p:] = A.T
    kkt[p:, :p] = A
    rhs = np.concatenate([XtW @ y, np.zeros(m)])
    return np.linalg.solve(kkt, rhs)[:p]


def market_return_identity_check(
    fit: CrossSectionFit,
    universe: EffectiveUniverse,
    returns: pd.Series,
    tol: float = 1e-6,
) -> bool:
    """Whether the market factor return equals the cap-weighted mean return."""
    if (MARKET, MARKET) not in fit.factor_returns.index:
        return False
    mc = universe.market_caps.reindex(universe.members)
    r = returns.reindex(universe.members)
    weighted_mean = float((mc * r).sum() / mc.sum())
    return abs(fit.market_return - weighted_mean) <= tol


def fit_day(panel: PanelDataset, loadings: LoadingHistory, date,
            subset: FactorSubset | None = None) -> CrossSectionFit:
    """Fit one trading day from a panel and its monthly loadings."""
    date = pd.Timestamp(date)
    matrix = loadings.at(date)
    if matrix is None:
        raise SolverError(f"no loadings in force on {date.date()}")
    universe = effective_universe(panel, matrix, date)
    design = build_design(universe, matrix, subset)
    return solve_cross_section(design, panel.returns.loc[date, design.securities])


def fit_range(panel: PanelDataset, loadings: LoadingHistory, start=None, end=None,
              subset: FactorSubset | None = None, threads: int = 1):
    """Fit every trading day in ``[start, end]`` that has a previous close.

    Returns
    -------
    fits : list of CrossSectionFit
        In date order.
    skipped : list of (Timestamp, str)
        Days whose fit failed, with the reason.
    """
    dates = panel.dates[1:]
    if start is not None:
        dates = dates[dates >= pd.Timestamp(start)]
    if end is not None:
        dates = dates[dates <= pd.Timestamp(end)]

    def _one(day):
        try:
            return fit_day(panel, loadings, day, subset)
        except SolverError as exc:
            return str(exc)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_one, dates))
    else:
        results = [_one(d) for d in dates]
    fits, skipped = [], []
    for day, res in zip(dates, results):
        if isinstance(res, CrossSectionFit):
            fits.append(res)
        else:
            skipped.append((day, res))
    if skipped:
        logger.warning("%d of %d days skipped", len(skipped), len(dates))
    return fits, skipped
