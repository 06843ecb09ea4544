from __future__ import annotations

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factormodel.cross_section import FactorSubset, fit_day
from factormodel.data import effective_universe
from factormodel.errors import EvaluationError
from factormodel.evaluation import (
    CrossSections, METRICS, assign_folds, evaluate_cross_validated, evaluate_in_sample, evaluate_subset,
    factor_group_report, format_report, horizon_sums, pooled_r2, style_addition_report, style_removal_report,
)
from factormodel.loadings import STYLE_NAMES
from factormodel.synthetic import SyntheticConfig, generate, planted_variance_share

@pytest.fixture(scope="module")
def direct_sections(direct_run):
    _, panel, truth = direct_run
    return CrossSections.build(panel, truth.loadings)


class TestPooling:
    def test_perfect_and_null_fits(self):
        r = np.array([0.01, -0.02, 0.03])
        assert pooled_r2(np.zeros(3), r) == 1.0
        assert pooled_r2(r, r) == 0.0

    def test_pooling_differs_from_averaging(self):
        # two dates with (SS_res, SS_tot) = (2, 10) and (18, 20)
        res = np.array([[np.sqrt(2.0), 0.0], [np.sqrt(18.0), 0.0]])
        ret = np.array([[np.sqrt(10.0), 0.0], [np.sqrt(20.0), 0.0]])
        pooled = pooled_r2(res, ret)
        daily = np.mean([1 - 2 / 10, 1 - 18 / 20])
        assert pooled == pytest.approx(1 - 20 / 30, rel=1e-12)
        assert daily == pytest.approx(0.45)
        assert abs(pooled - daily) > 0.05

    def test_degenerate_returns(self):
        with pytest.raises(EvaluationError, match="degenerate returns"):
            pooled_r2(np.zeros(4), np.zeros(4))

    def test_missing_cells_ignored(self):
        res = np.array([1.0, np.nan, 1.0])
        ret = np.array([2.0, 5.0, 2.0])
        assert pooled_r2(res, ret) == 1 - 2 / 8

    @settings(max_examples=100, deadline=None)
    @given(data=st.lists(st.tuples(st.floats(-1, 1), st.floats(0.01, 1)), min_size=2, max_size=60),
           seed=st.integers(0, 1000))
    def test_permutation_invariance(self, data, seed):
        res, ret = map(np.array, zip(*data))
        perm = np.random.default_rng(seed).permutation(len(res))
        assert pooled_r2(res[perm], ret[perm]) == pytest.approx(pooled_r2(res, ret), rel=1e-10, abs=1e-12)


class TestHorizon:
    def test_constant_daily_returns_sum(self):
        frame = pd.DataFrame(0.01, index=pd.RangeIndex(200), columns=["a", "b"])
        out = horizon_sums(frame, 90)
        assert len(out) == 2  # non-overlapping blocks, trailing 20 rows dropped
        np.testing.assert_allclose(out.to_numpy(), 0.9, rtol=1e-13)
        assert list(out.index) == [0, 90]

    def test_partial_presence(self):
        frame = pd.DataFrame({"a": [1.0, np.nan, 2.0], "b": [np.nan] * 3})
        out = horizon_sums(frame, 3)
        assert out.loc[0, "a"] == 3.0 and np.isnan(out.loc[0, "b"])

    def test_too_short(self):
        with pytest.raises(EvaluationError):
            horizon_sums(pd.DataFrame({"a": [1.0] * 10}), 90)


class TestFolds:
    def test_paper_universe_size(self):
        folds = assign_folds([f"S{i:05d}" for i in range(28629)], k=10, seed=1)
        sizes = folds.value_counts()
        assert set(sizes) == {2862, 2863}
        assert sizes.sum() == 28629

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(2, 500), k=st.integers(2, 12), seed=st.integers(0, 10**6))
    def test_partition(self, n, k, seed):
        ids = [f"S{i}" for i in range(n)]
        folds = assign_folds(ids, k, seed)
        assert sorted(folds.index) == sorted(ids)
        sizes = np.bincount(folds.to_numpy(), minlength=k)
        assert sizes.max() - sizes.min() <= 1

    def test_seeded_and_order_independent(self):
        ids = [f"S{i}" for i in range(50)]
        a = assign_folds(ids, 5, seed=3)
        pd.testing.assert_series_equal(a, assign_folds(ids[::-1], 5, seed=3))
        assert not a.equals(assign_folds(ids, 5, seed=4))


class TestNoiseless:
    def test_full_model_explains_everything(self, noiseless_run):
        _, panel, truth = noiseless_run
        sections = CrossSections.build(panel, truth.loadings)
        full = FactorSubset.full()
        assert evaluate_in_sample(panel, truth.loadings, full, sections=sections) == pytest.approx(1.0, abs=1e-12)
        assert evaluate_cross_validated(panel, truth.loadings, full, sections=sections) == pytest.approx(1.0, abs=1e-10)


def test_single_date_equals_weighted_r2(direct_run):
    _, panel, truth = direct_run
    day = truth.fitted_dates[7]
    fit = fit_day(panel, truth.loadings, day)
    universe = effective_universe(panel, truth.loadings.at(day), day)
    mc = universe.market_caps.reindex(universe.members).to_numpy()
    r = panel.returns.loc[day, universe.members].to_numpy()
    direct = 1 - np.sum(mc * fit.residuals.to_numpy() ** 2) / np.sum(mc * r**2)
    got = evaluate_in_sample(panel, truth.loadings, FactorSubset.full(), start=day, end=day)
    assert got == pytest.approx(direct, rel=1e-12)


def test_nested_in_sample(direct_run, direct_sections):
    _, panel, truth = direct_run
    chain = [
        FactorSubset.market_only(),
        FactorSubset(styles=STYLE_NAMES[:2], include_countries=False, include_industries=False),
        FactorSubset(styles=STYLE_NAMES[:2], include_countries=True, include_industries=False),
        FactorSubset(styles=STYLE_NAMES[:2]),
        FactorSubset.full(),
    ]
    values = [evaluate_in_sample(panel, truth.loadings, s, "1d", sections=direct_sections) for s in chain]
    assert all(b >= a - 1e-12 for a, b in zip(values, values[1:])), values


def test_ninety_day_nesting_not_guaranteed(direct_run, direct_sections):
    # daily fits minimize daily residuals, not their 90-day sums, so adding a
    # factor can lower the 90-day R² while raising the 1-day R²
    _, panel, truth = direct_run
    added = style_addition_report(panel, truth.loadings, cross_validate=False, sections=direct_sections)
    base, rows = added.iloc[0], added.iloc[1:]
    assert (rows["in_sample_1d"] > base["in_sample_1d"]).all()
    assert (rows["in_sample_90d"] < base["in_sample_90d"]).any()


def test_cv_below_in_sample(direct_sections):
    report = evaluate_subset(direct_sections, FactorSubset.full(), k=10, seed=0)
    assert report.r2_cv_1d <= report.r2_in_sample_1d
    assert report.n_folds == 10 and report.n_dates == len(direct_sections.designs)
    ss_res, ss_tot = report.sums["in_sample_1d"]
    assert report.r2_in_sample_1d == 1 - ss_res / ss_tot


def test_threads_reassociation(direct_sections):
    a = evaluate_subset(direct_sections, FactorSubset.full(), k=5, seed=1)
    b = evaluate_subset(direct_sections, FactorSubset.full(), k=5, seed=1, threads=4)
    for m in METRICS:
        assert a.metrics()[m] == pytest.approx(b.metrics()[m], rel=1e-10)


class TestReports:
    def test_factor_groups(self, direct_run, direct_sections):
        _, panel, truth = direct_run
        report = factor_group_report(panel, truth.loadings, k=10, seed=2, sections=direct_sections)
        assert report.shape == (4, 4) and list(report.columns) == list(METRICS)
        again = factor_group_report(panel, truth.loadings, k=10, seed=2, sections=direct_sections)
        pd.testing.assert_frame_equal(report, again, check_exact=True)
        text = format_report(report)
        assert len(text.splitlines()) == 5 and "Market + Country" in text

    def test_strong_country_beats_market_only(self):
        config = SyntheticConfig(n_securities=300, n_countries=4, n_industries=5, n_days=100,
                                 country_factor_vols=0.03, seed=8)
        panel, truth = generate(config)
        report = factor_group_report(panel, truth.loadings, k=10, seed=0)
        assert (report.loc["Market + Country"] > report.loc["Market only"]).all()

    def test_market_only_matches_planted_share(self):
        config = SyntheticConfig(n_securities=600, n_countries=4, n_industries=6, n_days=250, seed=21)
        panel, truth = generate(config)
        got = evaluate_in_sample(panel, truth.loadings, FactorSubset.market_only())
        expected = planted_variance_share(config, FactorSubset.market_only(), truth)
        assert abs(got - expected) <= 0.05

    def test_style_tables_shape_and_nesting(self, direct_run, direct_sections):
        _, panel, truth = direct_run
        added = style_addition_report(panel, truth.loadings, cross_validate=False, sections=direct_sections)
        removed = style_removal_report(panel, truth.loadings, cross_validate=False, sections=direct_sections)
        assert added.shape == (12, 4) and removed.shape == (12, 4)
        col = "in_sample_1d"
        assert (added[col].iloc[1:] >= added[col].iloc[0] - 1e-12).all()
        assert (removed[col].iloc[1:] <= removed[col].iloc[0] + 1e-12).all()
        assert added["cv_1d"].isna().all()


def _style_vols(**overrides):
    return tuple(overrides.get(s, 0.003) for s in STYLE_NAMES)


def test_planted_beta_gives_largest_gain():
    config = SyntheticConfig(n_securities=200, n_countries=3, n_industries=4, n_days=40,
                             style_factor_vols=_style_vols(Beta=0.02), seed=13)
    panel, truth = generate(config)
    report = style_addition_report(panel, truth.loadings, cross_validate=False)
    gains = report["in_sample_1d"].iloc[1:] - report.loc["No style factors", "in_sample_1d"]
    assert gains.idxmax() == "Beta"


def test_zero_return_factor_removal_matters_less():
    config = SyntheticConfig(n_securities=200, n_countries=3, n_industries=4, n_days=40,
                             style_factor_vols=_style_vols(Beta=0.01, Liquidity=0.0), seed=14)
    panel, truth = generate(config)
    report = style_removal_report(panel, truth.loadings, cross_validate=False)
    full = report.loc["All factors", "in_sample_1d"]
    assert full - report.loc["-Liquidity", "in_sample_1d"] < full - report.loc["-Beta", "in_sample_1d"]


def test_no_dates_is_an_error(raw_run):
    _, panel, truth = raw_run
    early = panel.dates[1]
    with pytest.raises(EvaluationError):
        evaluate_in_sample(panel, truth.loadings, FactorSubset.full(), start=early, end=early)
