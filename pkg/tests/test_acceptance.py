"""Acceptance criteria 1-11, each at its stated tolerance.

Every test carries an ``acceptance`` marker; the terminal summary lists one
PASS/FAIL line per criterion with the measured figures.
"""

from __future__ import annotations

import hashlib
import time

import numpy as np
import pandas as pd
import pytest

from conftest import T0, daily_panel, make_panel, obs, prices_from_returns
from factormodel.cli import main
from factormodel.cross_section import (
    COUNTRY, INDUSTRY, MARKET, STYLE, DesignMatrix, FactorSubset, fit_range,
    solve_cross_section, solve_kkt,
)
from factormodel.evaluation import (
    CrossSections, assign_folds, evaluate_in_sample, evaluate_subset, pooled_r2, style_addition_report,
    style_removal_report,
)
from factormodel.loadings import (
    STYLE_NAMES, beta_loading, book_to_price_loading, dividend_yield_loading, earnings_yield_loading,
    momentum_loadings, normalize_style_loadings, profitability_loading, robust_scale_clip,
    sales_growth_loading, size_loading, volatility_loading,
)
from factormodel.portfolio import BASE, PortfolioSpec, geometric_mean_return, run_backtest
from factormodel.synthetic import SyntheticConfig, generate, planted_variance_share

GROUP_ROWS = {
    "Market only": FactorSubset.market_only(),
    "Market + Style": FactorSubset(styles=STYLE_NAMES, include_countries=False, include_industries=False),
    "Market + Country": FactorSubset(styles=(), include_countries=True, include_industries=False),
    "Market + Industry": FactorSubset(styles=(), include_countries=False, include_industries=True),
}


@pytest.mark.acceptance(1, "noiseless recovery, 2000 securities x 250 days")
def test_noiseless_recovery(record_property):
    config = SyntheticConfig(n_securities=2000, n_countries=10, n_industries=14, n_days=250,
                             idio_vol_scale=0.0, seed=1)
    panel, truth = generate(config)
    began = time.perf_counter()
    fits, skipped = fit_range(panel, truth.loadings)
    elapsed = time.perf_counter() - began
    worst = 0.0
    for fit in fits:
        planted = truth.factor_returns.loc[fit.date].reindex(fit.factor_returns.index)
        worst = max(worst, float(np.linalg.norm(fit.factor_returns - planted) / np.linalg.norm(planted)))
    record_property("days", len(fits))
    record_property("max_rel_error", f"{worst:.2e}")
    record_property("fit_seconds", f"{elapsed:.1f}")
    assert not skipped and len(fits) == 250
    assert fits[0].factor_returns.shape[0] == 1 + 11 + 10 + 14
    assert worst <= 1e-8
    assert elapsed <= 60


@pytest.mark.acceptance(2, "constraint satisfaction on 250 fit dates")
def test_constraint_satisfaction(record_property):
    config = SyntheticConfig(n_securities=500, n_countries=10, n_industries=14, n_days=250, seed=2)
    panel, truth = generate(config)
    worst = 0.0
    sections = CrossSections.build(panel, truth.loadings)
    for day, design in sections.designs.items():
        fit = solve_cross_section(design, sections.returns[day])
        f = fit.factor_returns.to_numpy()
        scale = float(np.sum(design.weights * np.abs(sections.returns[day])))
        for block in (COUNTRY, INDUSTRY):
            idx = design.block_index(block)
            violation = abs(float((design.weights @ design.values[:, idx]) @ f[idx]))
            worst = max(worst, violation / scale)
    record_property("dates", len(sections.designs))
    record_property("max_violation_ratio", f"{worst:.2e}")
    assert len(sections.designs) == 250
    assert worst <= 1e-8


def _micro_instance(rng):
    n = int(rng.integers(8, 13))
    nc, ni, ns = [(2, 2, 0), (2, 1, 1), (1, 2, 1), (3, 1, 0)][int(rng.integers(4))]
    w = rng.lognormal(0, 1, n)
    cols, blocks = [(MARKET, MARKET)], [np.ones((n, 1))]
    if ns:
        s = rng.normal(size=(n, ns))
        blocks.append(s - (w @ s) / w.sum())
        cols += [(STYLE, f"s{j}") for j in range(ns)]
    for block, k in ((COUNTRY, nc), (INDUSTRY, ni)):
        m = np.zeros((n, k))
        m[np.arange(n), rng.permutation(np.arange(n) % k)] = 1.0
        blocks.append(m)
        cols += [(block, f"{block}{j}") for j in range(k)]
    X = np.hstack(blocks)
    return DesignMatrix(pd.Timestamp("2021-01-04"), pd.Index(range(n)), tuple(cols), X, w), rng.normal(0, 0.02, n)


@pytest.mark.acceptance(3, "null-space vs KKT on 100 micro-instances")
def test_kkt_oracle(record_property):
    rng = np.random.default_rng(3)
    worst, count = 0.0, 0
    while count < 100:
        design, y = _micro_instance(rng)
        assert design.shape[0] <= 12 and design.shape[1] <= 5
        fit = solve_cross_section(design, y)
        if fit.rank_deficient:
            continue  # KKT is singular without a unique solution
        kkt = solve_kkt(design, y)
        worst = max(worst, float(np.max(np.abs(fit.factor_returns.to_numpy() - kkt) / np.maximum(np.abs(kkt), 1e-12))))
        worst_abs = float(np.max(np.abs(fit.factor_returns.to_numpy() - kkt)))
        assert np.allclose(fit.factor_returns.to_numpy(), kkt, rtol=1e-8, atol=1e-12), worst_abs
        count += 1
    record_property("instances", count)
    record_property("max_rel_diff", f"{worst:.2e}")


@pytest.mark.acceptance(4, "in-sample R² vs planted share within 0.03, 5 seeds")
def test_r2_convergence(record_property, capsys):
    worst = 0.0
    lines = []
    for seed in range(5):
        config = SyntheticConfig(n_securities=2000, n_countries=10, n_industries=14, n_days=250, seed=seed)
        panel, truth = generate(config)
        sections = CrossSections.build(panel, truth.loadings)
        cells = []
        for name, subset in GROUP_ROWS.items():
            measured = evaluate_in_sample(panel, truth.loadings, subset, sections=sections)
            planted = planted_variance_share(config, subset, truth)
            worst = max(worst, abs(measured - planted))
            cells.append(f"{name} {measured:.4f} vs {planted:.4f}")
        lines.append(f"seed {seed}: " + ", ".join(cells))
    with capsys.disabled():
        print("\n" + "\n".join(lines))
    record_property("max_abs_gap", f"{worst:.4f}")
    assert worst <= 0.03


@pytest.mark.acceptance(5, "nesting monotonicity of in-sample R² (1-day horizon)")
def test_nesting(record_property):
    checked = 0
    ninety_day_breaks = 0
    for seed in (31, 32, 33):
        config = SyntheticConfig(n_securities=300, n_countries=5, n_industries=8, n_days=200, seed=seed)
        panel, truth = generate(config)
        sections = CrossSections.build(panel, truth.loadings)
        chain = [FactorSubset.market_only(),
                 FactorSubset(styles=STYLE_NAMES, include_countries=False, include_industries=False),
                 FactorSubset.full()]
        values = [evaluate_in_sample(panel, truth.loadings, s, sections=sections) for s in chain]
        assert values[0] <= values[1] <= values[2], values
        added = style_addition_report(panel, truth.loadings, cross_validate=False, sections=sections)
        removed = style_removal_report(panel, truth.loadings, cross_validate=False, sections=sections)
        assert (added["in_sample_1d"].iloc[1:] >= added["in_sample_1d"].iloc[0]).all()
        assert (removed["in_sample_1d"].iloc[1:] <= removed["in_sample_1d"].iloc[0]).all()
        ninety_day_breaks += int((added["in_sample_90d"].iloc[1:] < added["in_sample_90d"].iloc[0]).sum())
        ninety_day_breaks += int((removed["in_sample_90d"].iloc[1:] > removed["in_sample_90d"].iloc[0]).sum())
        checked += 1
    record_property("runs", checked)
    # informational: summed-residual R² is not a least-squares objective
    record_property("90d_rows_out_of_order", ninety_day_breaks)


@pytest.mark.acceptance(6, "mean CV R² <= mean in-sample R² over 20 seeds")
def test_cv_sanity(record_property):
    in_sample, cv = [], []
    for seed in range(20):
        config = SyntheticConfig(n_securities=250, n_countries=4, n_industries=6, n_days=30, seed=200 + seed)
        panel, truth = generate(config)
        sections = CrossSections.build(panel, truth.loadings)
        report = evaluate_subset(sections, FactorSubset.full(), k=10, seed=seed)
        in_sample.append(report.r2_in_sample_1d)
        cv.append(report.r2_cv_1d)
        sizes = assign_folds(sections.securities(), 10, seed).value_counts()
        assert sizes.max() - sizes.min() <= 1
    record_property("mean_in_sample", f"{np.mean(in_sample):.4f}")
    record_property("mean_cv", f"{np.mean(cv):.4f}")
    assert np.mean(cv) <= np.mean(in_sample)


@pytest.mark.acceptance(7, "pooled R² vs mean of daily R²")
def test_pooling(record_property):
    # day 1: SS_res 2, SS_tot 10; day 2: SS_res 18, SS_tot 20
    residuals = np.array([[1.0, 1.0], [3.0, 3.0]])
    returns = np.array([[1.0, 3.0], [2.0, 4.0]])
    pooled = pooled_r2(residuals, returns)
    daily = (pooled_r2(residuals[0], returns[0]) + pooled_r2(residuals[1], returns[1])) / 2
    record_property("pooled", f"{pooled:.4f}")
    record_property("mean_daily", f"{daily:.4f}")
    assert pooled == 1 - (2 + 18) / (10 + 20)
    assert abs(pooled - daily) > 0.05


@pytest.mark.acceptance(8, "normalization suite")
def test_normalization(raw_run, record_property):
    _, panel, truth = raw_run
    months = 0
    for day in truth.loadings:
        m = truth.loadings[day]
        ids = m.complete_securities()
        mc = m.market_caps.reindex(ids)
        for name in STYLE_NAMES:
            scaled = robust_scale_clip(m.raw.loc[ids, name])
            assert scaled.between(-3.0, 3.0).all()
            x = m.style.loc[ids, name]
            assert abs(float((mc * x).sum())) <= 1e-8 * float((mc * x.abs()).sum()) + 1e-12
        months += 1
    rng = np.random.default_rng(8)
    for _ in range(50):
        n = int(rng.integers(5, 200))
        raw = pd.Series(rng.standard_t(3, n))
        caps = pd.Series(rng.lognormal(0, 1, n))
        a, b = rng.uniform(0.01, 100), rng.uniform(-100, 100)
        np.testing.assert_allclose(normalize_style_loadings(a * raw + b, caps),
                                   normalize_style_loadings(raw, caps), atol=1e-9)
    record_property("factor_months", months * len(STYLE_NAMES))
    record_property("affine_vectors", 50)


@pytest.mark.acceptance(9, "loading formula spot checks")
def test_loading_spot_checks(record_property):
    checks = {}
    r = np.random.default_rng(9).normal(0, 0.01, 399)
    p = prices_from_returns(r)
    own = np.concatenate([[np.nan], p[1:] / p[:-1] - 1.0])
    checks["beta of self = 1"] = beta_loading(daily_panel({"A": p}, benchmark=own), T0)["A"] == 1.0
    checks["volatility of constant returns = 0"] = (
        volatility_loading(daily_panel({"A": 2.0 ** np.arange(100)}, days=100), T0)["A"] == 0.0)
    f = {"dividends_per_share_ttm": obs({"2022-01-15": 2.0})}
    checks["dividend yield 2/50 = 0.04"] = dividend_yield_loading(daily_panel({"A": 50.0}, fundamentals=f), T0)["A"] == 0.04
    f = {"net_income": obs({"2022-01-15": 10.0}), "total_assets": obs({"2022-01-15": 200.0})}
    checks["profitability 10/200 = 0.05"] = profitability_loading(daily_panel({"A": 10.0}, fundamentals=f), T0)["A"] == 0.05
    prices = np.full(400, 100.0)
    prices[-1] = 110.0
    checks["short-term momentum = 0.10"] = momentum_loadings(daily_panel({"A": prices}), T0).loc["A", "ShortTermMomentum"] == 0.10
    f = {"book_value_per_share": obs({"2022-02-01": 20.0})}
    checks["book to price 20/40 = 0.5"] = book_to_price_loading(daily_panel({"A": 40.0}, fundamentals=f), T0)["A"] == 0.5
    f = {"eps_reported_ttm": obs({"2022-02-01": 1.0}), "eps_consensus_next_year": obs({"2022-02-01": 2.0})}
    checks["earnings yield blend = 0.175"] = earnings_yield_loading(daily_panel({"A": 10.0}, fundamentals=f), T0)["A"] == 0.175
    checks["size of 1e9 = 9"] = size_loading(daily_panel({"A": 1e9}, days=5), T0)["A"] == 9.0
    sales = {T0 - pd.Timedelta(days=d): v for d, v in {1095: 100.0, 730: 110.0, 365: 120.0, 1: 130.0}.items()}
    f = {"sales_ttm": obs(sales)}
    checks["sales growth 3-year = 0.10"] = sales_growth_loading(daily_panel({"A": 10.0}, days=5, fundamentals=f), T0)["A"] == 0.10
    failed = [k for k, ok in checks.items() if not ok]
    record_property("exact", f"{len(checks) - len(failed)}/{len(checks)}")
    assert len(checks) == 9 and not failed, failed


@pytest.mark.acceptance(10, "backtest accounting")
def test_backtest_accounting(record_property):
    dates = pd.DatetimeIndex(["2021-01-27", "2021-01-28", "2021-01-29", "2021-02-01", "2021-02-02", "2021-02-03"])
    prices = pd.DataFrame({"A": [10, 11, 11, 12.1, 12.1, 13.31], "B": [30, 27, 29.7, 29.7, 32.67, 32.67]},
                          index=dates, dtype=float)
    panel = make_panel(prices)
    spec = PortfolioSpec(BASE, base_size=2, country_filter=None)
    result = run_backtest(spec, panel, None, start="2021-01-28")
    value, units, expected = 1.0, None, []
    for i in range(1, 6):
        if i in (1, 3):
            prev = prices.iloc[i - 1]
            units = value * (prev / prev.sum()) / prev
        new_value = float((units * prices.iloc[i]).sum())
        expected.append(new_value / value - 1)
        value = new_value
    hand_gap = float(np.max(np.abs(result.daily_returns.to_numpy() - expected)))
    assert hand_gap <= 1e-12

    config = SyntheticConfig(n_securities=80, n_countries=3, n_industries=4, n_days=780, seed=10)
    synth_panel, truth = generate(config)
    full = run_backtest(PortfolioSpec(BASE, base_size=30, country_filter=None), synth_panel, truth.loadings,
                        synth_panel.dates[1])
    chained = float(np.prod(1 + full.annual.to_numpy()))
    chain_gap = abs(chained / full.cumulative.iloc[-1] - 1)
    assert len(full.annual) >= 3 and chain_gap <= 1e-10

    assert geometric_mean_return([0.10] * 10, years=10) == 0.10
    assert geometric_mean_return([1.0] * 5 + [-0.5] * 5, years=10) == 0.0
    record_property("hand_gap", f"{hand_gap:.1e}")
    record_property("chain_gap", f"{chain_gap:.1e}")
    record_property("years", len(full.annual))


def _digests(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.acceptance(11, "CLI determinism: byte-identical reruns")
def test_cli_determinism(tmp_path, record_property):
    settings = ["mode=raw", "n_securities=100", "n_countries=3", "n_industries=4", "n_days=100",
                "start_date=2019-10-01"]
    runs = []
    for attempt in ("a", "b"):
        root = tmp_path / attempt
        data = root / "data"
        synth = ["synth", "--out", str(data), "--seed", "4"]
        for item in settings:
            synth += ["--set", item]
        shared = ["--data", str(data), "--loadings", str(data / "loadings.csv")]
        commands = [
            synth,
            ["loadings", "--data", str(data), "--out", str(root / "loadings")],
            ["fit", *shared, "--out", str(root / "fit")],
            ["evaluate", *shared, "--folds", "3", "--seed", "5", "--out", str(root / "evaluate")],
            ["backtest", *shared, "--base-size", "40", "--selection-size", "10", "--country", "none",
             "--start", "2020-11-02", "--out", str(root / "backtest")],
            ["summary", *shared, "--out", str(root / "summary")],
        ]
        for args in commands:
            assert main(args) == 0, args
        runs.append(_digests(root))
    a, b = runs
    assert a.keys() == b.keys()
    differing = [k for k in a if a[k] != b[k]]
    record_property("files", len(a))
    record_property("differing", len(differing))
    assert not differing, differing
    assert {k.split("/")[0] for k in a} >= {"data", "loadings", "fit", "evaluate", "backtest", "summary"}
