"""Panel ingestion, forward filling and per-date effective universes.

All time series are held as wide ``DataFrame`` objects indexed by date with
one column per security.  Missing observations are ``NaN``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping

import numpy as np
import pandas as pd

from factormodel.errors import DataError
from factormodel.files import atomic_open

if TYPE_CHECKING:
    from factormodel.loadings import LoadingMatrix

logger = logging.getLogger(__name__)

FUNDAMENTAL_FIELDS = (
    "dividends_per_share_ttm",
    "net_income",
    "total_assets",
    "book_value_per_share",
    "eps_reported_ttm",
    "eps_consensus_next_year",
    "sales_ttm",
)
DIMENSIONS = ("country", "industry")

#: Fundamentals and share counts are carried forward at most this many days.
MAX_GAP_DAYS = 183
MEMBERSHIP_TOLERANCE = 1e-9

PRICES_COLUMNS = ("date", "security_id", "close", "volume", "shares_outstanding")
FUNDAMENTALS_COLUMNS = ("date", "security_id", "field", "value")
MEMBERSHIPS_COLUMNS = ("security_id", "dimension", "label", "weight")
BENCHMARK_COLUMNS = ("date", "return")

STANDARD_FILENAMES = {
    "prices": "prices.csv",
    "fundamentals": "fundamentals.csv",
    "memberships": "memberships.csv",
    "benchmark": "benchmark.csv",
}


@dataclass(frozen=True)
class PanelDataset:
    """Immutable daily panel for the estimation universe.

    Attributes
    ----------
    dates : DatetimeIndex
        Trading days, strictly increasing.
    securities : Index
        Sorted security identifiers.
    prices, volume, shares_outstanding : DataFrame
        ``dates x securities``.
    fundamentals : dict of DataFrame
        One frame per field in ``FUNDAMENTAL_FIELDS``, indexed by the
        observation dates of that field (not necessarily trading days).
    country_membership, industry_membership : DataFrame
        ``securities x labels`` weights; rows of all-NaN mark securities
        without a membership record.
    benchmark_returns : Series
        Market index return per date.
    """

    dates: pd.DatetimeIndex
    securities: pd.Index
    prices: pd.DataFrame
    volume: pd.DataFrame
    shares_outstanding: pd.DataFrame
    fundamentals: Mapping[str, pd.DataFrame]
    country_membership: pd.DataFrame
    industry_membership: pd.DataFrame
    benchmark_returns: pd.Series

    @cached_property
    def returns(self) -> pd.DataFrame:
        """Simple return between consecutive trading days, ``P_t/P_{t-1} - 1``."""
        return self.prices / self.prices.shift(1) - 1.0

    @cached_property
    def filled_shares(self) -> pd.DataFrame:
        return forward_fill_frame(self.shares_outstanding, self.dates)

    @cached_property
    def market_cap(self) -> pd.DataFrame:
        """Close price times (forward-filled) shares outstanding."""
        mc = self.prices * self.filled_shares
        return mc.where(mc > 0)

    @cached_property
    def start_of_day_market_cap(self) -> pd.DataFrame:
        """Market cap at the previous close, i.e. known before each day trades."""
        return self.market_cap.shift(1)

    def membership(self, dimension: str) -> pd.DataFrame:
        if dimension == "country":
            return self.country_membership
        if dimension == "industry":
            return self.industry_membership
        raise ValueError(f"unknown membership dimension {dimension!r}")

    def fundamental(self, name: str) -> pd.DataFrame:
        return self.fundamentals[name]

    def position(self, date) -> int:
        """Index of ``date`` in the trading calendar; raises ``KeyError`` if absent."""
        return self.dates.get_loc(pd.Timestamp(date))

    def truncate(self, end) -> PanelDataset:
        """Panel restricted to observations dated on or before ``end``."""
        end = pd.Timestamp(end)
        keep = self.dates[self.dates <= end]
        return PanelDataset(
            dates=keep,
            securities=self.securities,
            prices=self.prices.loc[keep],
            volume=self.volume.loc[keep],
            shares_outstanding=self.shares_outstanding.loc[keep],
            fundamentals={k: v.loc[v.index <= end] for k, v in self.fundamentals.items()},
            country_membership=self.country_membership,
            industry_membership=self.industry_membership,
            benchmark_returns=self.benchmark_returns.loc[self.benchmark_returns.index <= end],
        )


@dataclass(frozen=True)
class EffectiveUniverse:
    """Securities usable in the cross section of one date."""

    date: pd.Timestamp
    members: pd.Index
    market_caps: pd.Series

    def __len__(self) -> int:
        return len(self.members)


def build_panel(
    prices: pd.DataFrame,
    volume: pd.DataFrame | None = None,
    shares_outstanding: pd.DataFrame | None = None,
    fundamentals: Mapping[str, pd.DataFrame] | None = None,
    country_membership: pd.DataFrame | None = None,
    industry_membership: pd.DataFrame | None = None,
    benchmark_returns: pd.Series | None = None,
) -> PanelDataset:
    """Assemble a validated :class:`PanelDataset` from wide frames.

    Frames are aligned on the union of all security identifiers; absent
    inputs become all-missing.
    """
    fundamentals = dict(fundamentals or {})
    unknown = set(fundamentals) - set(FUNDAMENTAL_FIELDS)
    if unknown:
        raise DataError(f"unknown fundamental fields {sorted(unknown)}")

    ids: set[str] = set(prices.columns)
    for frame in (volume, shares_outstanding, *fundamentals.values()):
        if frame is not None:
            ids.update(frame.columns)
    for frame in (country_membership, industry_membership):
        if frame is not None:
            ids.update(frame.index)
    securities = pd.Index(sorted(ids), dtype=object, name="security_id")

    dates = pd.DatetimeIndex(np.sort(pd.DatetimeIndex(prices.index).to_numpy()), name="date")
    if dates.has_duplicates:
        raise DataError("duplicate dates in price panel")

    def _wide(frame):
        if frame is None:
            return pd.DataFrame(np.nan, index=dates, columns=securities)
        out = frame.reindex(index=dates, columns=securities).astype(float)
        out.index.name, out.columns.name = "date", "security_id"
        return out

    def _fund(frame):
        if frame is None or frame.empty:
            index = pd.DatetimeIndex([], name="date")
            return pd.DataFrame(np.nan, index=index, columns=securities)
        frame = frame.sort_index()
        out = frame.reindex(columns=securities).astype(float)
        out.index = pd.DatetimeIndex(out.index.to_numpy(), name="date")
        out.columns.name = "security_id"
        return out

    def _members(frame, dimension):
        if frame is None:
            frame = pd.DataFrame(index=securities, dtype=float)
        frame = frame.reindex(index=securities).astype(float)
        frame = frame.reindex(columns=sorted(frame.columns))
        frame.index.name, frame.columns.name = "security_id", dimension
        values = frame.to_numpy()
        present = ~np.isnan(values).all(axis=1) if values.shape[1] else np.zeros(len(frame), bool)
        frame.loc[present] = frame.loc[present].fillna(0.0)
        if ((frame < 0) | (frame > 1)).to_numpy().any():
            raise DataError(f"{dimension} weights must lie in [0, 1]")
        sums = frame.loc[present].sum(axis=1)
        bad = (sums - 1.0).abs() > MEMBERSHIP_TOLERANCE
        if bad.any():
            sid = sums.index[bad.to_numpy()][0]
            raise DataError(f"security {sid!r} {dimension} weights sum {sums[sid]:.10g}")
        return frame

    prices_w = _wide(prices)
    if (prices_w <= 0).to_numpy().any():
        raise DataError("close prices must be positive")
    bench = pd.Series(dtype=float) if benchmark_returns is None else benchmark_returns.astype(float)
    bench = bench.sort_index()
    bench.index = pd.DatetimeIndex(bench.index.to_numpy(), name="date")
    bench.name = "return"
    if bench.index.has_duplicates:
        raise DataError("duplicate benchmark dates")
    if (bench <= -1).any():
        raise DataError("benchmark returns must exceed -1")

    return PanelDataset(
        dates=dates,
        securities=securities,
        prices=prices_w,
        volume=_wide(volume),
        shares_outstanding=_wide(shares_outstanding),
        fundamentals={name: _fund(fundamentals.get(name)) for name in FUNDAMENTAL_FIELDS},
        country_membership=_members(country_membership, "country"),
        industry_membership=_members(industry_membership, "industry"),
        benchmark_returns=bench,
    )


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------


def _read_table(path: Path, columns: Iterable[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DataError("file not found", path=path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        return pd.DataFrame({c: pd.Series(dtype=str) for c in columns})
    except (UnicodeDecodeError, pd.errors.ParserError) as exc:
        raise DataError(f"unreadable CSV ({exc})", path=path) from exc
    for col in columns:
        if col not in frame.columns:
            raise DataError(f"missing column {col!r}", path=path, line=1)
    return frame.reset_index(drop=True)


def _fail(path, frame, mask, col, message):
    row = int(np.flatnonzero(np.asarray(mask))[0])
    value = frame[col].iloc[row]
    raise DataError(f"{message}: {value!r}", path=path, line=row + 2, field=col)


def _parse_dates(path, frame, col="date") -> pd.Series:
    raw = frame[col].str.strip()
    parsed = pd.to_datetime(raw, format="%Y-%m-%d", errors="coerce")
    if parsed.isna().any():
        _fail(path, frame, parsed.isna(), col, "not an ISO-8601 date")
    return parsed


def _parse_numbers(path, frame, col, optional=False) -> pd.Series:
    raw = frame[col].str.strip()
    empty = raw == ""
    # float() is correctly rounded; pd.to_numeric is not, which breaks round trips
    try:
        values = raw.mask(empty).astype(float)
    except ValueError:
        def _convert(text):
            try:
                return float(text)
            except (TypeError, ValueError):
                return np.nan
        values = raw.mask(empty).map(_convert).astype(float)
    bad = ~np.isfinite(values.fillna(0.0)) | (values.isna() & ~empty)
    if not optional:
        bad |= empty
    if bad.any():
        _fail(path, frame, bad, col, "not a finite number")
    return values.astype(float)


def _check_duplicates(path, frame, keys):
    dup = frame.duplicated(subset=list(keys), keep="first")
    if dup.any():
        _fail(path, frame, dup, keys[-1], f"duplicate key {tuple(keys)}")


def _check_ids(path, frame):
    ids = frame["security_id"].str.strip()
    if (ids == "").any():
        _fail(path, frame, ids == "", "security_id", "empty security id")
    return ids


def load_panel(
    prices_path: str | Path,
    fundamentals_path: str | Path,
    memberships_path: str | Path,
    benchmark_path: str | Path,
) -> PanelDataset:
    """Read the four input CSV files into a validated panel.

    Raises
    ------
    DataError
        On a missing file or column, an unparsable value, a duplicate key
        or membership weights that do not sum to one. The message names
        the file, the line and the field.
    """
    prices_path, fundamentals_path = Path(prices_path), Path(fundamentals_path)
    memberships_path, benchmark_path = Path(memberships_path), Path(benchmark_path)

    raw = _read_table(prices_path, PRICES_COLUMNS)
    ids = _check_ids(prices_path, raw)
    dates = _parse_dates(prices_path, raw)
    close = _parse_numbers(prices_path, raw, "close")
    volume = _parse_numbers(prices_path, raw, "volume", optional=True)
    shares = _parse_numbers(prices_path, raw, "shares_outstanding", optional=True)
    if (close <= 0).any():
        _fail(prices_path, raw, close <= 0, "close", "close price must be positive")
    if (volume < 0).any():
        _fail(prices_path, raw, volume < 0, "volume", "volume must be non-negative")
    if (shares <= 0).any():
        _fail(prices_path, raw, shares <= 0, "shares_outstanding", "shares outstanding must be positive")
    long = pd.DataFrame({"date": dates, "security_id": ids, "close": close,
                         "volume": volume, "shares_outstanding": shares})
    _check_duplicates(prices_path, long, ("date", "security_id"))
    wide = {col: long.pivot(index="date", columns="security_id", values=col)
            for col in ("close", "volume", "shares_outstanding")}

    raw = _read_table(fundamentals_path, FUNDAMENTALS_COLUMNS)
    ids = _check_ids(fundamentals_path, raw)
    fields = raw["field"].str.strip()
    unknown = ~fields.isin(FUNDAMENTAL_FIELDS)
    if unknown.any():
        _fail(fundamentals_path, raw, unknown, "field", "unknown fundamental field")
    long = pd.DataFrame({
        "date": _parse_dates(fundamentals_path, raw),
        "security_id": ids,
        "field": fields,
        "value": _parse_numbers(fundamentals_path, raw, "value"),
    })
    _check_duplicates(fundamentals_path, long, ("date", "security_id", "field"))
    fundamentals = {
        name: grp.pivot(index="date", columns="security_id", values="value")
        for name, grp in long.groupby("field", sort=True)
    }

    raw = _read_table(memberships_path, MEMBERSHIPS_COLUMNS)
    ids = _check_ids(memberships_path, raw)
    dims = raw["dimension"].str.strip()
    if (~dims.isin(DIMENSIONS)).any():
        _fail(memberships_path, raw, ~dims.isin(DIMENSIONS), "dimension", "dimension must be country or industry")
    labels = raw["label"].str.strip()
    if (labels == "").any():
        _fail(memberships_path, raw, labels == "", "label", "empty label")
    weights = _parse_numbers(memberships_path, raw, "weight")
    out_of_range = (weights < 0) | (weights > 1)
    if out_of_range.any():
        _fail(memberships_path, raw, out_of_range, "weight", "weight outside [0, 1]")
    long = pd.DataFrame({"security_id": ids, "dimension": dims, "label": labels, "weight": weights})
    _check_duplicates(memberships_path, long, ("security_id", "dimension", "label"))
    members = {}
    for dim in DIMENSIONS:
        part = long[long["dimension"] == dim]
        sums = part.groupby("security_id")["weight"].sum()
        bad = (sums - 1.0).abs() > MEMBERSHIP_TOLERANCE
        if bad.any():
            sid = sums.index[bad.to_numpy()][0]
            mask = (long["security_id"] == sid) & (long["dimension"] == dim)
            _fail(memberships_path, raw, mask, "weight", f"{dim} weights sum {sums[sid]:.10g} for security")
        frame = part.pivot(index="security_id", columns="label", values="weight")
        frame = frame.loc[:, (frame.fillna(0.0) != 0).any(axis=0)]
        members[dim] = frame

    raw = _read_table(benchmark_path, BENCHMARK_COLUMNS)
    bdates = _parse_dates(benchmark_path, raw)
    bret = _parse_numbers(benchmark_path, raw, "return")
    if (bret <= -1).any():
        _fail(benchmark_path, raw, bret <= -1, "return", "return must exceed -1")
    dup = bdates.duplicated()
    if dup.any():
        _fail(benchmark_path, raw, dup, "date", "duplicate date")
    benchmark = pd.Series(bret.to_numpy(), index=pd.DatetimeIndex(bdates))

    panel = build_panel(
        prices=wide["close"],
        volume=wide["volume"],
        shares_outstanding=wide["shares_outstanding"],
        fundamentals=fundamentals,
        country_membership=members["country"],
        industry_membership=members["industry"],
        benchmark_returns=benchmark,
    )
    logger.info("loaded panel: %d dates x %d securities", len(panel.dates), len(panel.securities))
    return panel


def load_panel_dir(directory: str | Path) -> PanelDataset:
    """:func:`load_panel` on the standard file names inside ``directory``."""
    directory = Path(directory)
    return load_panel(*(directory / STANDARD_FILENAMES[k]
                        for k in ("prices", "fundamentals", "memberships", "benchmark")))


def _fmt(value: float) -> str:
    return "" if value != value else repr(float(value))


def write_panel(panel: PanelDataset, directory: str | Path) -> dict[str, Path]:
    """Write ``panel`` as the four input CSV files; reloading reproduces it."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {k: directory / v for k, v in STANDARD_FILENAMES.items()}

    close = panel.prices.to_numpy()
    vol = panel.volume.to_numpy()
    so = panel.shares_outstanding.to_numpy()
    day_strings = panel.dates.strftime("%Y-%m-%d")
    with atomic_open(paths["prices"]) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRICES_COLUMNS)
        for i, j in zip(*np.nonzero(~np.isnan(close))):
            w.writerow((day_strings[i], panel.securities[j], _fmt(close[i, j]),
                        _fmt(vol[i, j]), _fmt(so[i, j])))

    with atomic_open(paths["fundamentals"]) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FUNDAMENTALS_COLUMNS)
        for name in FUNDAMENTAL_FIELDS:
            frame = panel.fundamentals[name]
            values = frame.to_numpy()
            days = frame.index.strftime("%Y-%m-%d")
            for i, j in zip(*np.nonzero(~np.isnan(values))):
                w.writerow((days[i], frame.columns[j], name, _fmt(values[i, j])))

    with atomic_open(paths["memberships"]) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MEMBERSHIPS_COLUMNS)
        for dim in DIMENSIONS:
            frame = panel.membership(dim)
            for sid, row in frame.iterrows():
                for label, weight in row.items():
                    if weight == weight and weight != 0:
                        w.writerow((sid, dim, label, _fmt(weight)))

    with atomic_open(paths["benchmark"]) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCHMARK_COLUMNS)
        for day, value in panel.benchmark_returns.items():
            w.writerow((day.strftime("%Y-%m-%d"), _fmt(value)))
    return paths


# --------------------------------------------------------------------------
# Forward filling
# --------------------------------------------------------------------------


def forward_fill(series: pd.Series, dates, max_gap_days: int = MAX_GAP_DAYS) -> pd.Series:
    """Carry the most recent entry of ``series`` forward onto ``dates``.

    Each query date takes the latest entry dated at or before it, provided
    that entry is at most ``max_gap_days`` old; otherwise the result is
    missing. A ``NaN`` entry counts as an observation that the value is
    unknown, so it is carried forward like any other entry. This makes the
    operation idempotent on its own output.
    """
    index = pd.DatetimeIndex(dates)
    series = series.sort_index()
    series.index = pd.DatetimeIndex(series.index)
    if series.empty:
        return pd.Series(np.nan, index=index, dtype=float)
    return series.reindex(index, method="ffill", tolerance=pd.Timedelta(days=max_gap_days))


def forward_fill_frame(frame: pd.DataFrame, dates, max_gap_days: int = MAX_GAP_DAYS) -> pd.DataFrame:
    """Column-wise :func:`forward_fill` where ``NaN`` cells are unobserved.

    Used for wide panels, in which ``NaN`` only marks the absence of a row
    in the long-format source.
    """
    index = pd.DatetimeIndex(dates)
    if frame.empty or len(index) == 0:
        return pd.DataFrame(np.nan, index=index, columns=frame.columns)
    values = frame.to_numpy(dtype=float)
    obs_index = pd.DatetimeIndex(frame.index)
    # position of the latest observation row at or before each query date
    pos = obs_index.searchsorted(index, side="right") - 1
    n_rows, n_cols = values.shape
    observed = ~np.isnan(values)
    # last observed row per column, for every observation row
    rows = np.where(observed, np.arange(n_rows)[:, None], -1)
    last = np.maximum.accumulate(rows, axis=0)
    out = np.full((len(index), n_cols), np.nan)
    ok = pos >= 0
    src = np.full((len(index), n_cols), -1)
    src[ok] = last[pos[ok]]
    has = src >= 0
    qi, cj = np.nonzero(has)
    ages = (index.values[qi] - obs_index.values[src[qi, cj]]) / np.timedelta64(1, "D")
    keep = ages <= max_gap_days
    out[qi[keep], cj[keep]] = values[src[qi[keep], cj[keep]], cj[keep]]
    return pd.DataFrame(out, index=index, columns=frame.columns)


def value_as_of(frame: pd.DataFrame, target, max_gap_days: int = MAX_GAP_DAYS) -> pd.Series:
    """Latest observation per column at or before ``target``, within the gap cap."""
    return forward_fill_frame(frame, [pd.Timestamp(target)], max_gap_days).iloc[0]


# --------------------------------------------------------------------------
# Universe
# --------------------------------------------------------------------------


def effective_universe(panel: PanelDataset, loadings: LoadingMatrix, date) -> EffectiveUniverse:
    """Securities with complete loadings, memberships, a market cap and a return.

    The market cap used is the previous close (``start_of_day_market_cap``);
    it serves as the regression weight for the day's return.
    """
    date = pd.Timestamp(date)
    complete = loadings.complete_securities()
    if date not in panel.dates:
        return EffectiveUniverse(date, pd.Index([], dtype=object, name="security_id"),
                                 pd.Series(dtype=float))
    ret = panel.returns.loc[date].reindex(complete)
    mc = panel.start_of_day_market_cap.loc[date].reindex(complete)
    ok = ret.notna() & (mc > 0)
    members = complete[ok.to_numpy()]
    return EffectiveUniverse(date, members, mc[members])


def country_summary(universe: EffectiveUniverse, panel: PanelDataset) -> pd.DataFrame:
    """Per-country membership count and share of total market cap.

    A security split across countries contributes its membership weights
    to both the counts and the caps, so counts sum to the universe size.
    """
    if len(universe) == 0:
        raise DataError(f"empty universe on {universe.date.date()}")
    weights = panel.country_membership.loc[universe.members]
    weights = weights.loc[:, (weights != 0).any(axis=0)]
    counts = weights.sum(axis=0)
    caps = weights.mul(universe.market_caps, axis=0).sum(axis=0)
    out = pd.DataFrame({"count": counts, "market_cap_share": caps / caps.sum()})
    out.index.name = "country"
    return out.sort_values(["market_cap_share", "count"], ascending=False, kind="stable")
