"""Style factor loadings and their monthly normalization.

Raw loadings are computed at a recalculation date ``t0`` from data dated
strictly before ``t0`` only.  Calendar-day offsets such as ``t0 - 365`` are
resolved to the latest observation at or before the target day.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from factormodel.data import MAX_GAP_DAYS, PanelDataset, forward_fill_frame, value_as_of
from factormodel.errors import LoadingError

logger = logging.getLogger(__name__)


class StyleFactor(str, Enum):
    BETA = "Beta"
    VOLATILITY = "Volatility"
    DIVIDEND_YIELD = "DividendYield"
    PROFITABILITY = "Profitability"
    SHORT_TERM_MOMENTUM = "ShortTermMomentum"
    LONG_TERM_MOMENTUM = "LongTermMomentum"
    BOOK_TO_PRICE = "BookToPrice"
    EARNINGS_YIELD = "EarningsYield"
    SIZE = "Size"
    SALES_GROWTH = "SalesGrowth"
    LIQUIDITY = "Liquidity"


STYLE_NAMES: tuple[str, ...] = tuple(f.value for f in StyleFactor)

BETA_LOOKBACK_DAYS = 364
BETA_HORIZON = 7
MIN_BETA_WINDOWS = 40
STAT_LOOKBACK_DAYS = 91
MIN_COVERAGE = 0.8
#: Price anchors may fall on a non-trading day; look back at most this far.
PRICE_TOLERANCE_DAYS = 7
CLIP = 3.0
MIN_CROSS_SECTION = 4
CONSENSUS_WEIGHT = 3.0

_DAY = pd.Timedelta(days=1)


@dataclass(frozen=True)
class BetaFit:
    alpha: float
    beta: float
    n_obs: int


@dataclass(frozen=True)
class LoadingMatrix:
    """Normalized style loadings plus memberships valid from ``date``.

    ``style`` is ``securities x STYLE_NAMES``.  ``raw`` and ``market_caps``
    are kept for auditing and may be ``None`` for matrices read from file.
    """

    date: pd.Timestamp
    style: pd.DataFrame
    country: pd.DataFrame
    industry: pd.DataFrame
    raw: pd.DataFrame | None = None
    market_caps: pd.Series | None = None

    @property
    def securities(self) -> pd.Index:
        return self.style.index

    def complete_securities(self) -> pd.Index:
        """Securities with every style loading and both membership vectors."""
        ok = self.style.notna().all(axis=1)
        ok &= self.country.reindex(self.style.index).notna().any(axis=1)
        ok &= self.industry.reindex(self.style.index).notna().any(axis=1)
        return self.style.index[ok.to_numpy()]


class LoadingHistory(Mapping):
    """Monthly loading matrices keyed by recalculation date.

    A matrix is valid from its date until the next scheduled date.  A
    scheduled date whose computation failed maps to no matrix, and the days
    it would have covered have no loadings.
    """

    def __init__(self, schedule: Iterable, matrices: Mapping[pd.Timestamp, LoadingMatrix]):
        self.schedule = pd.DatetimeIndex(sorted(pd.Timestamp(d) for d in schedule))
        self._matrices = {pd.Timestamp(k): v for k, v in matrices.items()}

    def __getitem__(self, key) -> LoadingMatrix:
        return self._matrices[pd.Timestamp(key)]

    def __iter__(self):
        return iter(sorted(self._matrices))

    def __len__(self) -> int:
        return len(self._matrices)

    def at(self, date) -> LoadingMatrix | None:
        pos = self.schedule.searchsorted(pd.Timestamp(date), side="right") - 1
        if pos < 0:
            return None
        return self._matrices.get(self.schedule[pos])


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _window_days(panel: PanelDataset, date, lookback: int) -> pd.DatetimeIndex:
    t0 = pd.Timestamp(date)
    d = panel.dates
    return d[(d >= t0 - pd.Timedelta(days=lookback)) & (d <= t0 - _DAY)]


def price_as_of(panel: PanelDataset, target, tolerance_days: int = PRICE_TOLERANCE_DAYS) -> pd.Series:
    """Latest close at or before ``target`` and at most ``tolerance_days`` old."""
    target = pd.Timestamp(target)
    lo = target - pd.Timedelta(days=tolerance_days)
    rows = panel.prices.loc[(panel.dates >= lo) & (panel.dates <= target)]
    return forward_fill_frame(rows, [target], tolerance_days).iloc[0]


def market_cap_as_of(panel: PanelDataset, target, tolerance_days: int = PRICE_TOLERANCE_DAYS) -> pd.Series:
    target = pd.Timestamp(target)
    lo = target - pd.Timedelta(days=tolerance_days)
    rows = panel.market_cap.loc[(panel.dates >= lo) & (panel.dates <= target)]
    return forward_fill_frame(rows, [target], tolerance_days).iloc[0]


def _fundamental(panel: PanelDataset, name: str, target) -> pd.Series:
    return value_as_of(panel.fundamentals[name], target, MAX_GAP_DAYS)


def _beta_core(y: np.ndarray, x: np.ndarray, min_windows: int):
    """Column-wise OLS of ``y`` (windows x n) on ``x`` (windows,) over rows where ``y`` is finite."""
    valid = ~np.isnan(y)
    n = valid.sum(axis=0)
    xm = np.where(valid, x[:, None], np.nan)
    with np.errstate(invalid="ignore", divide="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns are handled below
        x_bar = np.nanmean(xm, axis=0) if len(x) else np.full(y.shape[1], np.nan)
        y_bar = np.nanmean(y, axis=0) if len(x) else np.full(y.shape[1], np.nan)
        dx = xm - x_bar
        dy = y - y_bar
        sxx = np.nansum(dx * dx, axis=0)
        sxy = np.nansum(dx * dy, axis=0)
        beta = sxy / sxx
    alpha = y_bar - beta * x_bar
    bad = (n < min_windows) | ~(sxx > 0)
    beta[bad] = np.nan
    alpha[bad] = np.nan
    return alpha, beta, n


def _horizon_sums(values: np.ndarray, horizon: int) -> np.ndarray:
    if values.shape[0] < horizon:
        return np.empty((0,) + values.shape[1:])
    windows = np.lib.stride_tricks.sliding_window_view(values, horizon, axis=0)
    return windows.sum(axis=-1)


def beta_fit(security_returns, benchmark_returns, min_windows: int = MIN_BETA_WINDOWS) -> BetaFit | None:
    """OLS of overlapping 7-day summed returns of a security on the benchmark.

    Both inputs are aligned daily return sequences.  Returns ``None`` when
    fewer than ``min_windows`` complete windows exist.
    """
    y = np.asarray(security_returns, dtype=float)
    x = np.asarray(benchmark_returns, dtype=float)
    if np.isnan(x).any():
        return None
    y7 = _horizon_sums(y[:, None], BETA_HORIZON)
    x7 = _horizon_sums(x, BETA_HORIZON)
    alpha, beta, n = _beta_core(y7, x7, min_windows)
    if np.isnan(beta[0]):
        return None
    return BetaFit(float(alpha[0]), float(beta[0]), int(n[0]))


# --------------------------------------------------------------------------
# raw loadings
# --------------------------------------------------------------------------


def beta_loading(panel: PanelDataset, date) -> pd.Series:
    """Slope of overlapping 7-day returns on the benchmark over the last 364 days.

    A missing benchmark return anywhere in the window disqualifies every
    security for that date.
    """
    days = _window_days(panel, date, BETA_LOOKBACK_DAYS)
    out = pd.Series(np.nan, index=panel.securities, name=StyleFactor.BETA.value)
    bench = panel.benchmark_returns.reindex(days).to_numpy()
    if len(days) == 0 or np.isnan(bench).any():
        if len(days):
            logger.debug("benchmark incomplete in beta window before %s", pd.Timestamp(date).date())
        return out
    y7 = _horizon_sums(panel.returns.loc[days].to_numpy(), BETA_HORIZON)
    x7 = _horizon_sums(bench, BETA_HORIZON)
    if len(x7) == 0:
        return out
    _, beta, _ = _beta_core(y7, x7, MIN_BETA_WINDOWS)
    out[:] = beta
    return out


def population_std(values: np.ndarray) -> np.ndarray:
    """Column-wise standard deviation with divisor equal to the observation count.

    Deviations are taken from the first observation before the two-pass
    update, so a constant column yields exactly zero.
    """
    values = np.asarray(values, dtype=float)
    valid = ~np.isnan(values)
    first = np.argmax(valid, axis=0)
    ref = values[first, np.arange(values.shape[1])]
    with np.errstate(invalid="ignore"):
        d = values - ref
        m = np.nanmean(d, axis=0)
        var = np.nanmean((d - m) ** 2, axis=0)
    return np.sqrt(var)


def volatility_loading(panel: PanelDataset, date) -> pd.Series:
    days = _window_days(panel, date, STAT_LOOKBACK_DAYS)
    out = pd.Series(np.nan, index=panel.securities, name=StyleFactor.VOLATILITY.value)
    if len(days) < 2:
        return out
    r = panel.returns.loc[days].to_numpy()
    count = (~np.isnan(r)).sum(axis=0)
    ok = (count >= MIN_COVERAGE * len(days)) & (count >= 2)
    if ok.any():
        out[ok] = population_std(r[:, ok])
    return out


def dividend_yield_loading(panel: PanelDataset, date) -> pd.Series:
    t = pd.Timestamp(date) - _DAY
    price = price_as_of(panel, t)
    dps = _fundamental(panel, "dividends_per_share_ttm", t)
    return (dps / price.where(price > 0)).rename(StyleFactor.DIVIDEND_YIELD.value)


def profitability_loading(panel: PanelDataset, date) -> pd.Series:
    t = pd.Timestamp(date) - _DAY
    income = _fundamental(panel, "net_income", t)
    assets = _fundamental(panel, "total_assets", t)
    return (income / assets.where(assets > 0)).rename(StyleFactor.PROFITABILITY.value)


def momentum_loadings(panel: PanelDataset, date) -> pd.DataFrame:
    """Short-term (1 to 29 days back) and long-term (29 to 365 days back) price change."""
    t0 = pd.Timestamp(date)
    p1 = price_as_of(panel, t0 - _DAY)
    p29 = price_as_of(panel, t0 - pd.Timedelta(days=29))
    p365 = price_as_of(panel, t0 - pd.Timedelta(days=365))
    return pd.DataFrame({
        StyleFactor.SHORT_TERM_MOMENTUM.value: (p1 - p29) / p29,
        StyleFactor.LONG_TERM_MOMENTUM.value: (p29 - p365) / p365,
    })


def book_to_price_loading(panel: PanelDataset, date) -> pd.Series:
    t = pd.Timestamp(date) - _DAY
    price = price_as_of(panel, t)
    bvps = _fundamental(panel, "book_value_per_share", t)
    return (bvps / price.where(price > 0)).rename(StyleFactor.BOOK_TO_PRICE.value)


def earnings_yield_loading(panel: PanelDataset, date) -> pd.Series:
    """EpS over price; a consensus estimate, if present, gets weight 3 against 1."""
    t = pd.Timestamp(date) - _DAY
    price = price_as_of(panel, t).where(lambda p: p > 0)
    reported = _fundamental(panel, "eps_reported_ttm", t)
    consensus = _fundamental(panel, "eps_consensus_next_year", t)
    blended = (reported + CONSENSUS_WEIGHT * consensus) / (1.0 + CONSENSUS_WEIGHT)
    eps = blended.where(consensus.notna(), reported)
    return (eps / price).rename(StyleFactor.EARNINGS_YIELD.value)


def size_loading(panel: PanelDataset, date) -> pd.Series:
    mc = market_cap_as_of(panel, pd.Timestamp(date) - _DAY)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log10(mc.where(mc > 0)).rename(StyleFactor.SIZE.value)


def sales_growth_loading(panel: PanelDataset, date) -> pd.Series:
    """Annualized sales growth over the longest of a 3-, 2- or 1-year span."""
    t0 = pd.Timestamp(date)
    latest = _fundamental(panel, "sales_ttm", t0 - _DAY)
    out = pd.Series(np.nan, index=panel.securities, name=StyleFactor.SALES_GROWTH.value)
    for years, offset in ((3, 1095), (2, 730), (1, 365)):
        past = _fundamental(panel, "sales_ttm", t0 - pd.Timedelta(days=offset))
        growth = (latest - past) / (years * past.where(past > 0))
        out = out.fillna(growth)
    return out


def liquidity_loading(panel: PanelDataset, date) -> pd.Series:
    """Natural log of the mean daily share turnover over the last 91 days."""
    days = _window_days(panel, date, STAT_LOOKBACK_DAYS)
    out = pd.Series(np.nan, index=panel.securities, name=StyleFactor.LIQUIDITY.value)
    if len(days) == 0:
        return out
    shares = panel.filled_shares.loc[days].to_numpy()
    volume = panel.volume.loc[days].to_numpy()
    with np.errstate(invalid="ignore", divide="ignore"):
        turnover = np.where(shares > 0, volume / shares, np.nan)
        count = (~np.isnan(turnover)).sum(axis=0)
        mean = np.nanmean(np.where(count > 0, turnover, 0.0), axis=0)
        ok = (count >= MIN_COVERAGE * len(days)) & (mean > 0)
        out[ok] = np.log(mean[ok])
    return out


def compute_raw_loadings(panel: PanelDataset, date) -> pd.DataFrame:
    """All eleven raw style loadings, ``securities x STYLE_NAMES``."""
    parts = [
        beta_loading(panel, date),
        volatility_loading(panel, date),
        dividend_yield_loading(panel, date),
        profitability_loading(panel, date),
        momentum_loadings(panel, date),
        book_to_price_loading(panel, date),
        earnings_yield_loading(panel, date),
        size_loading(panel, date),
        sales_growth_loading(panel, date),
        liquidity_loading(panel, date),
    ]
    raw = pd.concat(parts, axis=1).reindex(columns=list(STYLE_NAMES))
    raw = raw.where(np.isfinite(raw))
    raw.index.name = "security_id"
    return raw


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


def robust_scale_clip(raw: pd.Series, clip: float = CLIP) -> pd.Series:
    """Map the 25th/75th percentiles to -1/+1, then clip to ``[-clip, clip]``.

    Percentiles use linear interpolation between order statistics.  A
    zero interquartile range yields all zeros.
    """
    x = raw.astype(float)
    p25, p75 = np.percentile(x.to_numpy(), [25, 75])
    if not p75 > p25:
        return pd.Series(0.0, index=x.index, name=x.name)
    mid = 0.5 * (p25 + p75)
    half = 0.5 * (p75 - p25)
    return ((x - mid) / half).clip(-clip, clip)


def normalize_style_loadings(raw: pd.Series, market_caps: pd.Series) -> pd.Series:
    """Robust-scale, clip at ±3 and market-cap center one raw loading vector.

    Missing raw values are dropped.  The result satisfies
    ``sum(mc * x) == 0`` up to rounding.
    """
    x = raw.dropna()
    if len(x) < MIN_CROSS_SECTION:
        raise LoadingError(f"{raw.name}: only {len(x)} securities with raw values")
    mc = market_caps.reindex(x.index).astype(float)
    if not (mc > 0).all():
        raise LoadingError(f"{raw.name}: market caps missing or non-positive")
    scaled = robust_scale_clip(x)
    center = float((mc * scaled).sum() / mc.sum())
    return scaled - center


def compute_loading_matrix(panel: PanelDataset, date) -> LoadingMatrix:
    """Loading matrix at a recalculation date (normally a month's first trading day).

    Normalization runs over the securities that have all eleven raw values,
    both membership vectors and a positive market cap, so the centering holds
    on exactly the set that can enter a regression.
    """
    t0 = pd.Timestamp(date)
    raw = compute_raw_loadings(panel, t0)
    mc = market_cap_as_of(panel, t0 - _DAY)
    country = panel.country_membership
    industry = panel.industry_membership
    complete = (
        raw.notna().all(axis=1)
        & (mc > 0)
        & country.notna().any(axis=1)
        & industry.notna().any(axis=1)
    )
    ids = raw.index[complete.to_numpy()]
    if len(ids) < MIN_CROSS_SECTION:
        raise LoadingError(f"cross section too small on {t0.date()}: {len(ids)} complete securities")
    style = pd.DataFrame(
        {name: normalize_style_loadings(raw.loc[ids, name], mc[ids]) for name in STYLE_NAMES},
        index=ids,
    )
    return LoadingMatrix(
        date=t0,
        style=style,
        country=country.loc[ids],
        industry=industry.loc[ids],
        raw=raw.loc[ids],
        market_caps=mc[ids],
    )


def rebalance_dates(dates, start=None, end=None) -> pd.DatetimeIndex:
    """First trading day of each month covering ``[start, end]``.

    The month containing ``start`` is included even if its first trading day
    precedes ``start``, because that matrix covers ``start``.
    """
    dates = pd.DatetimeIndex(dates)
    if len(dates) == 0:
        return dates
    firsts = dates.to_series().groupby(dates.to_period("M")).min()
    firsts = pd.DatetimeIndex(firsts.to_numpy(), name="date")
    if start is not None:
        start = pd.Timestamp(start)
        firsts = firsts[firsts.to_period("M") >= start.to_period("M")]
    if end is not None:
        firsts = firsts[firsts <= pd.Timestamp(end)]
    return firsts


def monthly_loadings(panel: PanelDataset, start=None, end=None, threads: int = 1) -> LoadingHistory:
    """Loading matrices on every monthly recalculation date in range.

    Dates whose cross section is too small are logged and left without a
    matrix.
    """
    schedule = rebalance_dates(panel.dates, start, end)

    def _one(day):
        try:
            return compute_loading_matrix(panel, day)
        except LoadingError as exc:
            logger.warning("%s", exc)
            return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_one, schedule))
    else:
        results = [_one(d) for d in schedule]
    return LoadingHistory(schedule, {d: m for d, m in zip(schedule, results) if m is not None})


# --------------------------------------------------------------------------
# audit dump
# --------------------------------------------------------------------------

LOADINGS_COLUMNS = ("date", "security_id", "factor", "raw", "normalized")


def loadings_frame(history: Mapping[pd.Timestamp, LoadingMatrix]) -> pd.DataFrame:
    """Long ``date,security_id,factor,raw,normalized`` table for the dump file."""
    parts = []
    for day in sorted(history):
        m = history[day]
        norm = m.style.stack(future_stack=True).rename("normalized")
        if m.raw is not None:
            raw = m.raw.reindex(index=m.style.index, columns=m.style.columns).stack(future_stack=True)
        else:
            raw = pd.Series(np.nan, index=norm.index)
        part = pd.DataFrame({"raw": raw.to_numpy(), "normalized": norm.to_numpy()},
                            index=norm.index)
        part.index.names = ["security_id", "factor"]
        part = part.reset_index()
        part.insert(0, "date", day.strftime("%Y-%m-%d"))
        parts.append(part)
    if not parts:
        return pd.DataFrame(columns=list(LOADINGS_COLUMNS))
    return pd.concat(parts, ignore_index=True)[list(LOADINGS_COLUMNS)]


def history_from_frame(frame: pd.DataFrame, panel: PanelDataset) -> LoadingHistory:
    """Rebuild a :class:`LoadingHistory` from a loadings dump; memberships come from ``panel``."""
    unknown = set(frame["factor"]) - set(STYLE_NAMES)
    if unknown:
        raise LoadingError(f"unknown style factors in loadings file: {sorted(unknown)}")
    matrices = {}
    for day, grp in frame.groupby("date", sort=True):
        day = pd.Timestamp(day)
        style = grp.pivot(index="security_id", columns="factor", values="normalized")
        style = style.reindex(columns=list(STYLE_NAMES)).astype(float)
        raw = grp.pivot(index="security_id", columns="factor", values="raw")
        raw = raw.reindex(columns=list(STYLE_NAMES)).astype(float)
        style.index.name = raw.index.name = "security_id"
        ids = style.index.intersection(panel.securities)
        matrices[day] = LoadingMatrix(
            date=day,
            style=style.loc[ids],
            country=panel.country_membership.loc[ids],
            industry=panel.industry_membership.loc[ids],
            raw=raw.loc[ids],
        )
    return LoadingHistory(matrices.keys(), matrices)
