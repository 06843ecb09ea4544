"""Cross-sectional equity factor model with a synthetic-data oracle.

Modules
-------
data
    Panel ingestion, forward filling, effective universes.
loadings
    Monthly style loadings and their robust normalization.
cross_section
    Daily constrained cap-weighted regressions.
evaluation
    Pooled in-sample and cross-validated R².
portfolio
    Factor-tilted portfolios and backtests.
synthetic
    Panels generated from a planted factor structure.
"""

from factormodel.cross_section import (
    CrossSectionFit, FactorSubset, build_design, constraints_for, fit_day, fit_range, solve_cross_section,
)
from factormodel.data import PanelDataset, build_panel, effective_universe, load_panel, load_panel_dir, write_panel
from factormodel.errors import (
    ConfigError, DataError, EvaluationError, FactorModelError, LoadingError, PortfolioError, SolverError,
)
from factormodel.evaluation import (
    evaluate_cross_validated, evaluate_in_sample, factor_group_report, pooled_r2,
    style_addition_report, style_removal_report,
)
from factormodel.loadings import STYLE_NAMES, LoadingHistory, LoadingMatrix, StyleFactor, monthly_loadings
from factormodel.portfolio import PortfolioSpec, geometric_mean_return, returns_table, run_backtest
from factormodel.synthetic import PlantedTruth, SyntheticConfig, generate, planted_variance_share

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "CrossSectionFit", "DataError", "EvaluationError", "FactorModelError", "FactorSubset",
    "LoadingError", "LoadingHistory", "LoadingMatrix", "PanelDataset", "PlantedTruth", "PortfolioError",
    "PortfolioSpec", "STYLE_NAMES", "SolverError", "StyleFactor", "SyntheticConfig", "build_design",
    "build_panel", "constraints_for", "effective_universe", "evaluate_cross_validated",
    "evaluate_in_sample", "factor_group_report", "fit_day", "fit_range", "generate",
    "geometric_mean_return", "load_panel", "load_panel_dir", "monthly_loadings",
    "planted_variance_share", "pooled_r2", "returns_table", "run_backtest", "solve_cross_section",
    "style_addition_report", "style_removal_report", "write_panel",
]
