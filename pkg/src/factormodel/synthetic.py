"""Synthetic panels with a planted factor structure.

Two modes are supported:

``direct``
    Style loadings are drawn each month, normalized, and handed out as a
    :class:`LoadingHistory`; no fundamentals are generated.  Used to test
    the solver and the R² machinery in isolation.
``raw``
    Prices, volumes, shares and quarterly fundamentals are generated and the
    planted loadings are whatever :func:`compute_loading_matrix` produces
    from them at each month start, so the full pipeline reproduces them
    exactly.  A burn-in period supplies the required history.

Daily returns follow ``r = f_m + X_s f_s + X_c f_c + X_i f_i + eps`` with
``eps_k ~ N(0, idio_vol_scale**2 * mc_unit / mc_k)``.  Country and industry
factor returns are drawn independently and projected onto the cap-weighted
zero-sum hyperplane of the day's effective universe.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import pandas as pd

from factormodel.cross_section import (
    COUNTRY, INDUSTRY, MARKET, STYLE, CrossSectionFit, FactorSubset,
)
from factormodel.data import PanelDataset, build_panel
from factormodel.errors import ConfigError, DataError, LoadingError
from factormodel.loadings import (
    STYLE_NAMES, LoadingHistory, LoadingMatrix, compute_loading_matrix,
    normalize_style_loadings, rebalance_dates,
)

logger = logging.getLogger(__name__)

COUNTRY_LABELS = ("US", "JP", "GB", "CN", "FR", "DE", "CA", "CH", "AU", "KR",
                  "IN", "TW", "NL", "SE", "HK", "IT", "ES", "BR", "DK", "SG")
INDUSTRY_LABELS = (
    "Business Services", "Consumer Services", "Consumer Cyclicals", "Energy",
    "Finance", "Healthcare", "Industrials", "Non-Energy Materials",
    "Consumer Non-Cyclicals", "Technology", "Telecommunications", "Utilities",
    "Other", "Non-Corporate",
)
MODES = ("direct", "raw")
REPORT_SPACING = 63  # business days between fundamentals reports


@dataclass(frozen=True)
class SyntheticConfig:
    """Generator parameters.

    Volatilities are daily.  ``style_factor_vols``, ``country_factor_vols``
    and ``industry_factor_vols`` accept a scalar or one value per factor.
    Market caps are ``mc_unit * lognormal(mc_log_mean, mc_log_sd)``; with
    ``hold_market_caps`` the share count moves inversely to the price so
    each cap stays at its initial value.
    """

    n_securities: int = 300
    n_countries: int = 5
    n_industries: int = 14
    n_days: int = 250
    start_date: str = "2020-01-01"
    market_vol: float = 0.01
    style_factor_vols: float | tuple[float, ...] = 0.003
    country_factor_vols: float | tuple[float, ...] = 0.006
    industry_factor_vols: float | tuple[float, ...] = 0.004
    idio_vol_scale: float = 0.015
    mc_log_mean: float = 0.0
    mc_log_sd: float = 1.0
    mc_unit: float = 1e9
    membership_mixing_prob: float = 0.1
    hold_market_caps: bool = True
    mode: str = "direct"
    burn_in_days: int = 400
    seed: int = 0

    def __post_init__(self):
        for name in ("style_factor_vols", "country_factor_vols", "industry_factor_vols"):
            value = getattr(self, name)
            if not np.isscalar(value):
                object.__setattr__(self, name, tuple(float(v) for v in value))
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if min(self.n_countries, self.n_industries, self.n_days) < 1:
            raise ConfigError("n_countries, n_industries and n_days must be positive")
        if self.n_securities < self.n_countries + self.n_industries + 13:
            raise ConfigError("n_securities must be at least n_countries + n_industries + 13")
        vols = [self.market_vol, self.idio_vol_scale,
                *np.atleast_1d(self.style_factor_vols),
                *np.atleast_1d(self.country_factor_vols),
                *np.atleast_1d(self.industry_factor_vols)]
        if min(vols) < 0:
            raise ConfigError("volatilities must be non-negative")
        if not 0 <= self.membership_mixing_prob <= 1:
            raise ConfigError("membership_mixing_prob must lie in [0, 1]")
        if self.mc_unit <= 0:
            raise ConfigError("mc_unit must be positive")
        self._vols("style_factor_vols", len(STYLE_NAMES))
        self._vols("country_factor_vols", self.n_countries)
        self._vols("industry_factor_vols", self.n_industries)

    def _vols(self, name: str, n: int) -> np.ndarray:
        value = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
        if len(value) == 1:
            return np.full(n, value[0])
        if len(value) != n:
            raise ConfigError(f"{name} needs 1 or {n} values, got {len(value)}")
        return value

    @property
    def style_vols(self) -> np.ndarray:
        return self._vols("style_factor_vols", len(STYLE_NAMES))

    @property
    def country_vols(self) -> np.ndarray:
        return self._vols("country_factor_vols", self.n_countries)

    @property
    def industry_vols(self) -> np.ndarray:
        return self._vols("industry_factor_vols", self.n_industries)

    def replace(self, **changes) -> SyntheticConfig:
        return SyntheticConfig(**{**asdict(self), **changes})

    @classmethod
    def from_mapping(cls, values: dict) -> SyntheticConfig:
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**values)


@dataclass
class PlantedTruth:
    """Factor returns, loadings and noise used to build a synthetic panel.

    ``factor_returns`` has one row per return date and ``(block, name)``
    columns; a row is all ``NaN`` on days without a loading matrix.
    """

    factor_returns: pd.DataFrame
    loadings: LoadingHistory
    idiosyncratic: pd.DataFrame
    country_factors_degenerate: bool = False
    industry_factors_degenerate: bool = False
    fitted_dates: pd.DatetimeIndex = field(default_factory=lambda: pd.DatetimeIndex([]))

    def long_frame(self) -> pd.DataFrame:
        """``date,factor_type,factor_name,value`` rows for the fitted dates."""
        fr = self.factor_returns.loc[self.fitted_dates]
        stacked = fr.stack([0, 1], future_stack=True).dropna()
        stacked.index.names = ["date", "factor_type", "factor_name"]
        out = stacked.rename("value").reset_index()
        out["date"] = out["date"].dt.strftime("%Y-%m-%d")
        return out


# --------------------------------------------------------------------------
# structure
# --------------------------------------------------------------------------


def _labels(prefix_labels: Sequence[str], n: int, prefix: str) -> list[str]:
    if n <= len(prefix_labels):
        return list(prefix_labels[:n])
    return list(prefix_labels) + [f"{prefix}{i:02d}" for i in range(len(prefix_labels), n)]


def _memberships(rng, n: int, labels: list[str], mixing: float, skew: float) -> pd.DataFrame:
    k = len(labels)
    p = 1.0 / np.arange(1, k + 1) ** skew
    p /= p.sum()
    primary = np.concatenate([np.arange(min(k, n)), rng.choice(k, size=max(n - k, 0), p=p)])
    primary = rng.permutation(primary)
    weights = np.zeros((n, k))
    weights[np.arange(n), primary] = 1.0
    if k > 1:
        split = rng.random(n) < mixing
        other = (primary + rng.integers(1, k, size=n)) % k
        share = np.round(rng.uniform(0.2, 0.8, size=n), 2)
        rows = np.flatnonzero(split)
        weights[rows, primary[rows]] = share[rows]
        weights[rows, other[rows]] = 1.0 - share[rows]
    return pd.DataFrame(weights, columns=labels)


@dataclass
class _Structure:
    ids: pd.Index
    dates: pd.DatetimeIndex
    mc0: np.ndarray
    p0: np.ndarray
    country: pd.DataFrame
    industry: pd.DataFrame


def _structure(config: SyntheticConfig, rng) -> _Structure:
    n = config.n_securities
    ids = pd.Index([f"S{k:05d}" for k in range(n)], dtype=object, name="security_id")
    n_dates = config.n_days + 1 + (config.burn_in_days if config.mode == "raw" else 0)
    dates = pd.bdate_range(config.start_date, periods=n_dates, name="date")
    mc0 = config.mc_unit * rng.lognormal(config.mc_log_mean, config.mc_log_sd, size=n)
    p0 = rng.uniform(10.0, 200.0, size=n)
    country = _memberships(rng, n, _labels(COUNTRY_LABELS, config.n_countries, "C"),
                           config.membership_mixing_prob, skew=0.8)
    industry = _memberships(rng, n, _labels(INDUSTRY_LABELS, config.n_industries, "Industry "),
                            config.membership_mixing_prob, skew=0.3)
    country.index = industry.index = ids
    return _Structure(ids, dates, mc0, p0, country, industry)


def _streams(seed: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)]


def _direct_loadings(config: SyntheticConfig, st: _Structure, rng) -> LoadingHistory:
    """Monthly heavy-tailed raw draws, normalized against the initial caps."""
    schedule = rebalance_dates(st.dates)
    matrices = {}
    mc = pd.Series(st.mc0, index=st.ids)
    for day in schedule:
        raw = pd.DataFrame(rng.standard_t(5, size=(len(st.ids), len(STYLE_NAMES))),
                           index=st.ids, columns=list(STYLE_NAMES))
        style = pd.DataFrame({s: normalize_style_loadings(raw[s].rename(s), mc) for s in STYLE_NAMES})
        matrices[day] = LoadingMatrix(day, style, st.country, st.industry, raw=raw, market_caps=mc)
    return LoadingHistory(schedule, matrices)


def _project(g: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Orthogonal projection of ``g`` onto ``{f : a @ f = 0}``."""
    if len(g) == 1:
        return np.zeros(1)
    return g - a * (a @ g) / (a @ a)


# --------------------------------------------------------------------------
# raw inputs
# --------------------------------------------------------------------------


def _raw_fundamentals(config: SyntheticConfig, st: _Structure, rng) -> dict[str, pd.DataFrame]:
    n = len(st.ids)
    offsets = rng.integers(0, REPORT_SPACING, size=n)
    so0 = st.mc0 / st.p0
    sales0 = st.mc0 * rng.lognormal(-0.5, 0.5, n)
    growth = rng.normal(0.06, 0.10, n)
    assets = st.mc0 * rng.lognormal(0.0, 0.5, n)
    roa = rng.normal(0.05, 0.05, n)
    book = st.mc0 * rng.lognormal(-0.5, 0.5, n)
    earn_yield = rng.normal(0.05, 0.04, n)
    has_consensus = rng.random(n) < 0.7
    payer = rng.random(n) < 0.7
    div_yield = rng.uniform(0.005, 0.05, n)

    data = {name: {} for name in ("sales_ttm", "total_assets", "net_income", "book_value_per_share",
                                  "eps_reported_ttm", "eps_consensus_next_year",
                                  "dividends_per_share_ttm")}
    start = st.dates[0]
    for k, sid in enumerate(st.ids):
        days = st.dates[offsets[k]::REPORT_SPACING]
        years = ((days - start).days / 365.0).to_numpy()
        m = len(days)
        noise = lambda sd: rng.lognormal(0.0, sd, m)  # noqa: E731
        data["sales_ttm"][sid] = pd.Series(sales0[k] * (1 + growth[k]) ** years * noise(0.02), index=days)
        ta = assets[k] * (1.02 ** years) * noise(0.01)
        data["total_assets"][sid] = pd.Series(ta, index=days)
        data["net_income"][sid] = pd.Series(ta * (roa[k] + rng.normal(0, 0.01, m)), index=days)
        data["book_value_per_share"][sid] = pd.Series(book[k] / so0[k] * noise(0.02), index=days)
        eps = earn_yield[k] * st.p0[k] * noise(0.05)
        data["eps_reported_ttm"][sid] = pd.Series(eps, index=days)
        if has_consensus[k]:
            data["eps_consensus_next_year"][sid] = pd.Series(eps * (1 + rng.normal(0.05, 0.05, m)), index=days)
        dps = div_yield[k] * st.p0[k] * noise(0.02) if payer[k] else np.zeros(m)
        data["dividends_per_share_ttm"][sid] = pd.Series(dps, index=days)
    return {name: pd.DataFrame(cols).sort_index() for name, cols in data.items()}


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def _factor_columns(st: _Structure) -> pd.MultiIndex:
    cols = [(MARKET, MARKET)] + [(STYLE, s) for s in STYLE_NAMES]
    cols += [(COUNTRY, c) for c in st.country.columns]
    cols += [(INDUSTRY, i) for i in st.industry.columns]
    return pd.MultiIndex.from_tuples(cols, names=["factor_type", "factor_name"])


def generate(config: SyntheticConfig) -> tuple[PanelDataset, PlantedTruth]:
    """Build a panel and its planted truth; a pure function of ``config``."""
    rng_struct, rng_load, rng_fac, rng_idio, rng_raw = _streams(config.seed)
    st = _structure(config, rng_struct)
    n, n_dates = len(st.ids), len(st.dates)
    raw_mode = config.mode == "raw"

    fundamentals = _raw_fundamentals(config, st, rng_raw) if raw_mode else {}
    turnover = np.exp(rng_raw.normal(-5.0, 0.5, n))
    schedule = rebalance_dates(st.dates)
    if raw_mode:
        history_map: dict = {}
    else:
        direct = _direct_loadings(config, st, rng_load)

    prices = np.full((n_dates, n), np.nan)
    shares = np.full((n_dates, n), np.nan)
    prices[0] = st.p0
    shares[0] = st.mc0 / st.p0
    bench = np.full(n_dates, np.nan)
    columns = _factor_columns(st)
    truth = np.full((n_dates, len(columns)), np.nan)
    idio = np.full((n_dates, n), np.nan)
    fitted: list[pd.Timestamp] = []

    Xc = st.country.to_numpy()
    Xi = st.industry.to_numpy()
    style_vols, country_vols, industry_vols = config.style_vols, config.country_vols, config.industry_vols
    bench_series = pd.Series(bench, index=st.dates)

    def _panel_until(i: int) -> PanelDataset:
        days = st.dates[:i]
        return build_panel(
            prices=pd.DataFrame(prices[:i], index=days, columns=st.ids),
            volume=pd.DataFrame(volume[:i], index=days, columns=st.ids),
            shares_outstanding=pd.DataFrame(shares[:i], index=days, columns=st.ids),
            fundamentals={k: v.loc[v.index < st.dates[i]] for k, v in fundamentals.items()},
            country_membership=st.country,
            industry_membership=st.industry,
            benchmark_returns=pd.Series(bench[:i], index=days).dropna(),
        )

    volume = np.full((n_dates, n), np.nan)
    volume[0] = turnover * shares[0] * rng_raw.lognormal(0.0, 0.3, n)

    # a matrix dated on the first panel day governs the returns that follow it
    current: LoadingMatrix | None = None if raw_mode else direct.get(st.dates[0])
    for i in range(1, n_dates):
        day = st.dates[i]
        if day in schedule:
            if raw_mode:
                try:
                    current = compute_loading_matrix(_panel_until(i), day)
                    history_map[day] = current
                except LoadingError:
                    current = None
            else:
                current = direct.get(day)
        mc_prev = prices[i - 1] * shares[i - 1]

        if current is not None:
            in_universe = st.ids.isin(current.complete_securities())
        else:
            in_universe = np.ones(n, dtype=bool)
        w = np.where(in_universe, mc_prev, 0.0)

        f_m = rng_fac.normal(0.0, config.market_vol)
        f_s = rng_fac.normal(0.0, 1.0, len(STYLE_NAMES)) * style_vols
        f_c = _project(rng_fac.normal(0.0, 1.0, Xc.shape[1]) * country_vols, w @ Xc)
        f_i = _project(rng_fac.normal(0.0, 1.0, Xi.shape[1]) * industry_vols, w @ Xi)
        eps = rng_idio.normal(0.0, 1.0, n) * config.idio_vol_scale * np.sqrt(config.mc_unit / mc_prev)

        r = f_m + Xc @ f_c + Xi @ f_i + eps
        if current is not None:
            style = current.style.reindex(st.ids).to_numpy()
            r = r + np.where(in_universe, np.nan_to_num(style) @ f_s, 0.0)
            truth[i] = np.concatenate([[f_m], f_s, f_c, f_i])
            fitted.append(day)
        else:
            truth[i] = np.concatenate([[f_m], np.full(len(STYLE_NAMES), np.nan), f_c, f_i])
        if (r <= -1).any():
            raise DataError("synthetic return at or below -1; reduce the volatilities")
        idio[i] = eps
        bench[i] = f_m
        prices[i] = prices[i - 1] * (1.0 + r)
        shares[i] = st.mc0 / prices[i] if config.hold_market_caps else shares[i - 1]
        volume[i] = turnover * shares[i] * rng_raw.lognormal(0.0, 0.3, n)

    bench_series = pd.Series(bench[1:], index=st.dates[1:])
    panel = build_panel(
        prices=pd.DataFrame(prices, index=st.dates, columns=st.ids),
        volume=pd.DataFrame(volume, index=st.dates, columns=st.ids),
        shares_outstanding=pd.DataFrame(shares, index=st.dates, columns=st.ids),
        fundamentals=fundamentals,
        country_membership=st.country,
        industry_membership=st.industry,
        benchmark_returns=bench_series,
    )
    history = LoadingHistory(schedule, history_map) if raw_mode else direct
    planted = PlantedTruth(
        factor_returns=pd.DataFrame(truth[1:], index=st.dates[1:], columns=columns),
        loadings=history,
        idiosyncratic=pd.DataFrame(idio[1:], index=st.dates[1:], columns=st.ids),
        country_factors_degenerate=Xc.shape[1] == 1,
        industry_factors_degenerate=Xi.shape[1] == 1,
        fitted_dates=pd.DatetimeIndex(fitted, name="date"),
    )
    if planted.country_factors_degenerate:
        logger.warning("single country: country factor returns are identically zero")
    return panel, planted


# --------------------------------------------------------------------------
# oracles
# --------------------------------------------------------------------------


def recovery_error(fit: CrossSectionFit, truth: PlantedTruth, date) -> dict[str, float]:
    """Root-mean-square error of estimated against planted factor returns, per block."""
    date = pd.Timestamp(date)
    planted = truth.factor_returns.loc[date].dropna()
    estimated = fit.factor_returns
    if set(planted.index) != set(estimated.index):
        missing = set(planted.index) ^ set(estimated.index)
        raise ValueError(f"factor sets differ: {sorted(missing)[:5]}")
    diff = estimated - planted.reindex(estimated.index)
    out = {}
    for block in (MARKET, STYLE, COUNTRY, INDUSTRY):
        part = diff[diff.index.get_level_values(0) == block]
        if len(part):
            out[block] = float(np.sqrt(np.mean(part.to_numpy() ** 2)))
    return out


def _block_variance(X: np.ndarray, w: np.ndarray, vols: np.ndarray, project: bool) -> float:
    """E[sum_k w_k (X_k f)^2] for f ~ N(0, diag(vols^2)), optionally projected."""
    cov = np.diag(vols**2)
    if project:
        a = w @ X
        if len(a) == 1:
            return 0.0
        P = np.eye(len(a)) - np.outer(a, a) / (a @ a)
        cov = P @ cov @ P
    gram = (X.T * w) @ X
    return float(np.trace(gram @ cov))


def planted_components(config: SyntheticConfig, truth: PlantedTruth | None = None) -> dict:
    """Expected cap-weighted sums of squares of each planted component, pooled over fitted days.

    Keys are ``market``, ``idio``, ``country``, ``industry`` and each style
    name.  Uses the initial caps; this is exact when caps are held constant.
    """
    if truth is None:
        if config.mode == "raw":
            _, truth = generate(config)
            history, days = truth.loadings, truth.fitted_dates
        else:
            rng_struct, rng_load, *_ = _streams(config.seed)
            st = _structure(config, rng_struct)
            history = _direct_loadings(config, st, rng_load)
            days = st.dates[1:]
    else:
        history, days = truth.loadings, truth.fitted_dates
    rng_struct, *_ = _streams(config.seed)
    st = _structure(config, rng_struct)
    mc = pd.Series(st.mc0, index=st.ids)

    totals = {k: 0.0 for k in (MARKET, "idio", COUNTRY, INDUSTRY, *STYLE_NAMES)}
    cache: dict = {}
    for day in days:
        m = history.at(day)
        if m is None:
            continue
        if m.date not in cache:
            ids = m.complete_securities()
            w = mc.reindex(ids).to_numpy()
            part = {MARKET: w.sum() * config.market_vol**2,
                    "idio": len(ids) * config.idio_vol_scale**2 * config.mc_unit}
            X = m.style.loc[ids].to_numpy()
            per_style = (X**2 * w[:, None]).sum(axis=0) * config.style_vols**2
            part.update(zip(STYLE_NAMES, per_style))
            part[COUNTRY] = _block_variance(m.country.loc[ids].fillna(0).to_numpy(), w,
                                            config.country_vols, project=True)
            part[INDUSTRY] = _block_variance(m.industry.loc[ids].fillna(0).to_numpy(), w,
                                             config.industry_vols, project=True)
            cache[m.date] = part
        for k, v in cache[m.date].items():
            totals[k] += v
    return totals


def planted_variance_share(config: SyntheticConfig, subset: FactorSubset,
                           truth: PlantedTruth | None = None) -> float:
    """Expected R² of ``subset`` implied by the planted volatilities.

    Components are independent with zero mean, so the expected pooled total
    sum of squares is the sum of the component terms and a subset explains
    the terms of the blocks it contains.
    """
    comp = planted_components(config, truth)
    total = sum(comp.values())
    explained = comp[MARKET] if subset.include_market else 0.0
    explained += sum(comp[s] for s in subset.styles)
    if subset.include_countries:
        explained += comp[COUNTRY]
    if subset.include_industries:
        explained += comp[INDUSTRY]
    return explained / total
