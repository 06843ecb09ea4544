"""Factor-tilted portfolios and monthly-rebalanced backtests.

Each month the largest securities by market cap form a base universe.  A
tilted portfolio keeps the part of that universe ranking best on one or more
style loadings, weighted by market cap.  Between rebalances holdings drift
with prices.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from factormodel.data import PanelDataset
from factormodel.errors import PortfolioError
from factormodel.files import write_text
from factormodel.loadings import STYLE_NAMES, LoadingHistory, rebalance_dates

logger = logging.getLogger(__name__)

MARKET_CAP = "MarketCap"
LARGEST = "largest"
SMALLEST = "smallest"
DIRECTIONS = (LARGEST, SMALLEST)
BASE = "Base"
DEFAULT_BASE_SIZE = 500
DEFAULT_SELECTION_SIZE = 125
DEFAULT_COUNTRY = "US"
COUNTRY_THRESHOLD = 0.5

Selector = tuple[str, str]

PRESETS: dict[str, tuple[Selector, ...]] = {
    BASE: (),
    "Value": (("BookToPrice", LARGEST), ("EarningsYield", LARGEST)),
    "LowSize": ((MARKET_CAP, SMALLEST),),
    "Momentum": (("ShortTermMomentum", LARGEST), ("LongTermMomentum", LARGEST)),
    "Quality": (("Profitability", LARGEST),),
    "Yield": (("DividendYield", LARGEST),),
    "LowVolatility": (("Volatility", SMALLEST),),
    "Growth": (("SalesGrowth", LARGEST),),
    "Liquidity": (("Liquidity", LARGEST),),
}


@dataclass(frozen=True)
class PortfolioSpec:
    """Recipe for one portfolio.

    An empty ``selectors`` tuple means the whole base universe is held.
    ``country_filter`` of ``None`` disables the country cut.
    """

    name: str
    selectors: tuple[Selector, ...] = ()
    base_size: int = DEFAULT_BASE_SIZE
    selection_size: int = DEFAULT_SELECTION_SIZE
    country_filter: str | None = DEFAULT_COUNTRY

    def __post_init__(self):
        object.__setattr__(self, "selectors", tuple(tuple(s) for s in self.selectors))
        if self.base_size < 1:
            raise PortfolioError("base_size must be positive")
        if self.selectors and not 1 <= self.selection_size <= self.base_size:
            raise PortfolioError(
                f"selection_size {self.selection_size} must lie in [1, base_size={self.base_size}]")
        for factor, direction in self.selectors:
            if factor != MARKET_CAP and factor not in STYLE_NAMES:
                raise PortfolioError(f"unknown selector factor {factor!r}")
            if direction not in DIRECTIONS:
                raise PortfolioError(f"selector direction must be one of {DIRECTIONS}, got {direction!r}")

    @property
    def holds_base(self) -> bool:
        return not self.selectors

    @property
    def target_size(self) -> int:
        return self.base_size if self.holds_base else self.selection_size

    @classmethod
    def preset(cls, name: str, base_size: int = DEFAULT_BASE_SIZE,
               selection_size: int = DEFAULT_SELECTION_SIZE,
               country_filter: str | None = DEFAULT_COUNTRY) -> PortfolioSpec:
        if name not in PRESETS:
            raise PortfolioError(f"unknown portfolio {name!r}; choose from {sorted(PRESETS)}")
        return cls(name, PRESETS[name], base_size, selection_size, country_filter)

    @classmethod
    def from_mapping(cls, data: Mapping) -> PortfolioSpec:
        """Build from a JSON-like mapping.

        Keys: ``name``; optional ``selectors`` as ``[[factor, direction], ...]``
        (defaults to the preset of that name), ``base_size``,
        ``selection_size`` and ``country_filter``.
        """
        known = {"name", "selectors", "base_size", "selection_size", "country_filter"}
        extra = set(data) - known
        if extra:
            raise PortfolioError(f"unknown portfolio spec keys {sorted(extra)}")
        if "name" not in data:
            raise PortfolioError("portfolio spec needs a 'name'")
        name = str(data["name"])
        if "selectors" in data:
            selectors = tuple(tuple(s) for s in data["selectors"])
            if any(len(s) != 2 for s in selectors):
                raise PortfolioError("each selector must be a [factor, direction] pair")
        elif name in PRESETS:
            selectors = PRESETS[name]
        else:
            raise PortfolioError(f"portfolio {name!r} is not a preset and lists no selectors")
        try:
            return cls(
                name=name,
                selectors=selectors,
                base_size=int(data.get("base_size", DEFAULT_BASE_SIZE)),
                selection_size=int(data.get("selection_size", DEFAULT_SELECTION_SIZE)),
                country_filter=data.get("country_filter", DEFAULT_COUNTRY),
            )
        except (TypeError, ValueError) as exc:
            raise PortfolioError(f"invalid portfolio spec: {exc}") from exc

    @classmethod
    def from_file(cls, path: str | Path) -> PortfolioSpec:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise PortfolioError(f"{path}: file not found") from None
        except json.JSONDecodeError as exc:
            raise PortfolioError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, Mapping):
            raise PortfolioError(f"{path}: expected a JSON object")
        return cls.from_mapping(data)


@dataclass(frozen=True)
class Holdings:
    """Start-of-day weights set on a rebalance date."""

    rebalance_date: pd.Timestamp
    weights: pd.Series
    short: bool = False
    excluded: tuple[str, ...] = ()

    def __post_init__(self):
        w = self.weights.to_numpy(dtype=float)
        if len(w) == 0:
            raise PortfolioError(f"empty holdings on {self.rebalance_date.date()}")
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise PortfolioError("holdings weights must be non-negative and sum to one")


# --------------------------------------------------------------------------
# selection
# --------------------------------------------------------------------------


def base_universe(panel: PanelDataset, date, n: int = DEFAULT_BASE_SIZE,
                  country_filter: str | None = DEFAULT_COUNTRY) -> pd.Index:
    """The ``n`` largest securities by market cap on ``date``, largest first.

    The cap is the previous close, known before trading on ``date``.  With a
    ``country_filter`` only securities weighting that country above one half
    are eligible.  Ties are broken by security id ascending.
    """
    date = pd.Timestamp(date)
    if date not in panel.dates:
        raise PortfolioError(f"{date.date()} is not a trading day")
    mc = panel.start_of_day_market_cap.loc[date]
    mc = mc[mc > 0]
    if country_filter is not None:
        members = panel.country_membership
        if country_filter not in members.columns:
            raise PortfolioError(f"no security belongs to country {country_filter!r}")
        share = members[country_filter].reindex(mc.index).fillna(0.0)
        mc = mc[share > COUNTRY_THRESHOLD]
    if len(mc) < n:
        raise PortfolioError(f"base universe on {date.date()} needs {n} securities, {len(mc)} available")
    frame = pd.DataFrame({"mc": mc.to_numpy(), "id": mc.index.to_numpy()})
    frame = frame.sort_values(["mc", "id"], ascending=[False, True], kind="mergesort")
    return pd.Index(frame["id"].iloc[:n].to_numpy(), name="security_id")


def average_rank_select(scores: pd.DataFrame, directions: Sequence[str], m: int) -> tuple[pd.Index, pd.Index]:
    """Pick the ``m`` candidates with the best average rank across columns.

    Parameters
    ----------
    scores : DataFrame
        Candidates by factor.
    directions : sequence of str
        ``"largest"`` or ``"smallest"`` per column: which end ranks first.
    m : int
        Number to select.

    Returns
    -------
    selected, excluded : Index
        Selection ordered best first, and the candidates dropped for a
        missing score.

    Ties in a factor share the mean of their ranks; ties in the average
    rank go to the smaller security id.
    """
    if len(directions) != scores.shape[1]:
        raise PortfolioError("one direction per score column is required")
    complete = scores.notna().all(axis=1)
    excluded = scores.index[~complete.to_numpy()]
    scores = scores[complete]
    ranks = pd.DataFrame(index=scores.index)
    for col, direction in zip(scores.columns, directions):
        if direction not in DIRECTIONS:
            raise PortfolioError(f"unknown direction {direction!r}")
        ranks[col] = scores[col].rank(method="average", ascending=direction == SMALLEST)
    order = pd.DataFrame({"avg": ranks.mean(axis=1).to_numpy(), "id": scores.index.to_numpy()})
    order = order.sort_values(["avg", "id"], kind="mergesort")
    selected = pd.Index(order["id"].iloc[:m].to_numpy(), name=scores.index.name)
    return selected, excluded


def _selector_scores(spec: PortfolioSpec, panel: PanelDataset, loadings: LoadingHistory | None,
                     date: pd.Timestamp, candidates: pd.Index) -> pd.DataFrame:
    needs_styles = any(f != MARKET_CAP for f, _ in spec.selectors)
    matrix = loadings.at(date) if (needs_styles and loadings is not None) else None
    if needs_styles and matrix is None:
        raise PortfolioError(f"no loadings available for {date.date()}")
    cols = {}
    for i, (factor, _) in enumerate(spec.selectors):
        if factor == MARKET_CAP:
            values = panel.start_of_day_market_cap.loc[date]
        else:
            values = matrix.style[factor]
        cols[f"{i}:{factor}"] = values.reindex(candidates)
    return pd.DataFrame(cols, index=candidates)


def rebalance(spec: PortfolioSpec, panel: PanelDataset, loadings: LoadingHistory | None, date) -> Holdings:
    """Holdings for ``spec`` set at the start of ``date``, weighted by market cap."""
    date = pd.Timestamp(date)
    base = base_universe(panel, date, spec.base_size, spec.country_filter)
    excluded: tuple[str, ...] = ()
    if spec.holds_base:
        chosen = base
    else:
        scores = _selector_scores(spec, panel, loadings, date, base)
        chosen, dropped = average_rank_select(scores, [d for _, d in spec.selectors], spec.selection_size)
        excluded = tuple(dropped)
        if excluded:
            logger.info("%s %s: %d candidates without loadings excluded",
                        spec.name, date.date(), len(excluded))
    short = len(chosen) < spec.target_size
    if short:
        logger.warning("%s %s: only %d of %d securities selectable",
                       spec.name, date.date(), len(chosen), spec.target_size)
    if len(chosen) == 0:
        raise PortfolioError(f"{spec.name}: nothing selectable on {date.date()}")
    mc = panel.start_of_day_market_cap.loc[date, chosen].to_numpy(dtype=float)
    weights = pd.Series(mc / mc.sum(), index=pd.Index(chosen, name="security_id"), name="weight")
    return Holdings(date, weights, short=short, excluded=excluded)


# --------------------------------------------------------------------------
# backtest
# --------------------------------------------------------------------------


def geometric_mean_return(annual: Iterable[float], years: int | None = None) -> float:
    """Constant annual return compounding to the same total, ``(prod(1 + r))**(1/n) - 1``.

    Evaluated in log space so that offsetting years cancel exactly.  If
    ``years`` is given the number of returns must match it.
    """
    values = [float(r) for r in annual]
    if not values:
        raise PortfolioError("no annual returns")
    if years is not None and len(values) != years:
        raise PortfolioError(f"expected {years} annual returns, got {len(values)}")
    if any(not r > -1.0 for r in values):
        raise PortfolioError("total loss year: annual return <= -100%")
    return math.expm1(math.fsum(math.log1p(r) for r in values) / len(values))


@dataclass(frozen=True)
class BacktestResult:
    """Daily portfolio returns plus the bookkeeping of how they arose.

    ``flags`` lists ``date, security_id, reason`` rows for holdings that
    had no return on a day (``missing``, counted as zero) or left the
    panel (``delisted``).
    """

    name: str
    daily_returns: pd.Series
    holdings: tuple[Holdings, ...] = ()
    flags: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=["date", "security_id", "reason"]))

    @property
    def cumulative(self) -> pd.Series:
        """Value of one unit invested at the start, after each day."""
        return (1.0 + self.daily_returns).cumprod().rename("cumulative")

    @property
    def annual(self) -> pd.Series:
        """Calendar-year returns ``prod(1 + r_t) - 1`` over each year's days."""
        grouped = (1.0 + self.daily_returns).groupby(self.daily_returns.index.year)
        out = grouped.prod() - 1.0
        out.index.name = "year"
        return out.rename("return")

    @property
    def geometric_mean(self) -> float:
        return geometric_mean_return(self.annual)

    @property
    def short_rebalances(self) -> list[pd.Timestamp]:
        return [h.rebalance_date for h in self.holdings if h.short]


def _rebalance_days(dates: pd.DatetimeIndex) -> pd.DatetimeIndex:
    firsts = rebalance_dates(dates)
    firsts = firsts[firsts >= dates[0]]
    if len(firsts) == 0 or firsts[0] != dates[0]:
        firsts = pd.DatetimeIndex([dates[0], *firsts], name="date")
    return firsts


def run_backtest(spec: PortfolioSpec, panel: PanelDataset, loadings: LoadingHistory | None,
                 start=None, end=None) -> BacktestResult:
    """Backtest ``spec`` over the trading days in ``[start, end]``.

    Holdings are reset on the first day of the range and on the first
    trading day of every later month.  Within a month each weight drifts by
    ``w <- w (1 + r) / (1 + R)`` after the day's portfolio return
    ``R = sum w r``.  A holding without a return on a day counts as zero that
    day; one with no later price is dropped and the rest renormalized.
    """
    dates = panel.dates
    if start is not None:
        dates = dates[dates >= pd.Timestamp(start)]
    if end is not None:
        dates = dates[dates <= pd.Timestamp(end)]
    if len(dates) == 0:
        raise PortfolioError("backtest range contains no trading days")

    resets = set(_rebalance_days(dates))
    prices = panel.prices
    has_price = prices.notna().to_numpy()
    # last calendar position with a price, per security
    last_pos = pd.Series(
        np.where(has_price.any(axis=0), len(prices) - 1 - np.argmax(has_price[::-1], axis=0), -1),
        index=panel.securities,
    )
    returns = panel.returns

    daily, holdings, flags = [], [], []
    ids: np.ndarray = np.array([], dtype=object)
    w = np.array([])
    for day in dates:
        if day in resets:
            h = rebalance(spec, panel, loadings, day)
            holdings.append(h)
            ids, w = h.weights.index.to_numpy(), h.weights.to_numpy(dtype=float).copy()
        pos = panel.dates.get_loc(day)
        gone = last_pos.reindex(ids).to_numpy() < pos
        if gone.any():
            for sid in ids[gone]:
                flags.append((day, sid, "delisted"))
            ids, w = ids[~gone], w[~gone]
            if len(ids) == 0:
                raise PortfolioError(f"{spec.name}: every holding delisted by {day.date()}")
            w = w / w.sum()
        r = returns.loc[day, ids].to_numpy(dtype=float)
        missing = np.isnan(r)
        if missing.any():
            for sid in ids[missing]:
                flags.append((day, sid, "missing"))
            r = np.where(missing, 0.0, r)
        port = float(w @ r)
        daily.append(port)
        w = w * (1.0 + r) / (1.0 + port)

    flag_frame = pd.DataFrame(flags, columns=["date", "security_id", "reason"])
    if len(flag_frame):
        logger.warning("%s: %d holding-days flagged (missing returns or delistings)",
                       spec.name, len(flag_frame))
    series = pd.Series(daily, index=pd.DatetimeIndex(dates, name="date"), name="return")
    return BacktestResult(spec.name, series, tuple(holdings), flag_frame)


def run_backtests(specs: Sequence[PortfolioSpec], panel: PanelDataset, loadings: LoadingHistory | None,
                  start=None, end=None, threads: int = 1) -> list[BacktestResult]:
    """Independent backtests of several specs, in input order."""
    def _one(spec):
        return run_backtest(spec, panel, loadings, start, end)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_one, specs))
    return [_one(s) for s in specs]


# --------------------------------------------------------------------------
# reporting
# --------------------------------------------------------------------------

AVERAGE_COLUMN = "average"


@dataclass(frozen=True)
class ReturnsTable:
    """Annual and geometric-mean returns per portfolio.

    ``annotations`` holds ``"out"`` or ``"under"`` where a portfolio beat or
    trailed the base portfolio in that column, and ``""`` otherwise.
    """

    values: pd.DataFrame
    annotations: pd.DataFrame

    def to_csv(self, path: str | Path | None = None, decimals: int = 4) -> str:
        text = self.values.to_csv(float_format=f"%.{decimals}f", lineterminator="\n")
        if path is not None:
            write_text(path, text)
        return text

    @staticmethod
    def read_csv(path) -> pd.DataFrame:
        frame = pd.read_csv(path, index_col=0)
        frame.index.name = "portfolio"
        return frame

    def format(self, decimals: int = 2) -> str:
        """Plain text in percent; ``+`` marks out- and ``-`` underperformance."""
        mark = {"out": "+", "under": "-", "": " "}
        header = ["portfolio", *map(str, self.values.columns)]
        body = []
        for name in self.values.index:
            cells = [str(name)]
            for col in self.values.columns:
                v = self.values.at[name, col]
                cells.append(f"{100 * v:.{decimals}f}{mark[self.annotations.at[name, col]]}")
            body.append(cells)
        widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
        return "\n".join(
            "  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(row))
            for row in [header, *body]
        )


def returns_table(results: Sequence[BacktestResult], base_name: str = BASE) -> ReturnsTable:
    """Rows are portfolios, columns are calendar years plus the geometric mean."""
    if not results:
        raise PortfolioError("no backtest results")
    years = list(results[0].annual.index)
    rows = {}
    for res in results:
        annual = res.annual
        if list(annual.index) != years:
            raise PortfolioError(f"{res.name}: year range differs from {results[0].name}")
        rows[res.name] = [*annual.to_numpy(), res.geometric_mean]
    values = pd.DataFrame.from_dict(rows, orient="index", columns=[*map(str, years), AVERAGE_COLUMN])
    values.index.name = "portfolio"
    annotations = pd.DataFrame("", index=values.index, columns=values.columns)
    if base_name in values.index:
        base = values.loc[base_name]
        for name in values.index:
            if name == base_name:
                continue
            row = values.loc[name]
            annotations.loc[name] = np.where(row > base, "out", np.where(row < base, "under", ""))
    return ReturnsTable(values, annotations)
