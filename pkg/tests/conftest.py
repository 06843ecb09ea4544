"""Shared fixtures: small hand-built panels and cached synthetic runs.

Tests marked ``acceptance(n, title)`` also get one PASS/FAIL line each in
the terminal summary.
"""

from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from factormodel.data import build_panel
from factormodel.synthetic import SyntheticConfig, generate


def make_panel(prices: pd.DataFrame, shares=1.0, volume=None, fundamentals=None,
               country=None, industry=None, benchmark=None):
    """Wide-frame panel with scalar or frame shares; memberships default to one label each."""
    ids = list(prices.columns)
    if np.isscalar(shares):
        shares = pd.DataFrame(float(shares), index=prices.index, columns=ids)
    if country is None:
        country = pd.DataFrame({"US": 1.0}, index=ids)
    if industry is None:
        industry = pd.DataFrame({"Tech": 1.0}, index=ids)
    return build_panel(prices=prices, volume=volume, shares_outstanding=shares,
                       fundamentals=fundamentals, country_membership=country,
                       industry_membership=industry, benchmark_returns=benchmark)


def business_days(start: str, n: int) -> pd.DatetimeIndex:
    return pd.bdate_range(start, periods=n, name="date")


T0 = pd.Timestamp("2022-03-01")
DAY = pd.Timedelta(days=1)


def daily_panel(prices: dict, days: int = 400, shares=1.0, fundamentals=None, volume=None, benchmark=None):
    """Calendar-daily panel ending the day before ``T0``; ``prices`` maps id -> array or scalar."""
    dates = pd.date_range(end=T0 - DAY, periods=days, name="date")
    frame = pd.DataFrame({k: np.broadcast_to(np.asarray(v, dtype=float), days) for k, v in prices.items()},
                         index=dates)
    if volume is not None:
        volume = pd.DataFrame({k: np.broadcast_to(np.asarray(v, float), days) for k, v in volume.items()},
                              index=dates)
    if benchmark is not None:
        benchmark = pd.Series(benchmark, index=dates)
    return make_panel(frame, shares=shares, volume=volume, fundamentals=fundamentals, benchmark=benchmark)


def obs(values: dict, sid="A"):
    """One-column fundamentals frame from ``{date: value}``."""
    return pd.DataFrame({sid: list(values.values())}, index=pd.DatetimeIndex(list(values)))


def prices_from_returns(returns, p0=100.0):
    return p0 * np.cumprod(np.concatenate([[1.0], 1.0 + np.asarray(returns)]))


@pytest.fixture(scope="session")
def raw_run():
    """Raw-fundamentals synthetic panel: the loadings pipeline runs end to end."""
    config = SyntheticConfig(n_securities=120, n_countries=3, n_industries=5, n_days=45,
                             mode="raw", seed=11)
    return config, *generate(config)


@pytest.fixture(scope="session")
def direct_run():
    """Pre-normalized loadings with noise, for evaluation and backtest tests."""
    config = SyntheticConfig(n_securities=200, n_countries=4, n_industries=6, n_days=130, seed=5)
    return config, *generate(config)


@pytest.fixture(scope="session")
def noiseless_run():
    config = SyntheticConfig(n_securities=150, n_countries=4, n_industries=6, n_days=40,
                             idio_vol_scale=0.0, seed=3)
    return config, *generate(config)


# --------------------------------------------------------------------------
# acceptance summary
# --------------------------------------------------------------------------

_ACCEPTANCE: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = marker.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _ACCEPTANCE[number] = ("PASS" if report.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}  {title}" + (f"  [{detail}]" if detail else ""))
