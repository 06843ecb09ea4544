"""Command-line interface.

Every command reads its settings from an optional flat config file (see
:mod:`factormodel.config`); flags given on the command line win.  Exit
status is 0 on success, 2 for bad input, configuration or data, and 1 for
internal errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import pandas as pd

from factormodel.config import RunConfig, load_config, parse_styles, parse_synthetic_value
from factormodel.cross_section import fit_range
from factormodel.data import country_summary, effective_universe, load_panel, write_panel
from factormodel.errors import ConfigError, FactorModelError, LoadingError
from factormodel.evaluation import (
    CrossSections, factor_group_report, format_report, style_addition_report, style_removal_report,
)
from factormodel.files import write_csv, write_text
from factormodel.loadings import LoadingHistory, history_from_frame, loadings_frame, monthly_loadings
from factormodel.portfolio import BASE, MARKET_CAP, PRESETS, PortfolioSpec, returns_table, run_backtests
from factormodel.synthetic import generate

logger = logging.getLogger("factormodel")

EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _configure_logging(verbose: int) -> None:
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("factormodel")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def _date_string(index) -> list[str]:
    return list(pd.DatetimeIndex(index).strftime("%Y-%m-%d"))


def _read_loadings(path: Path, panel) -> LoadingHistory:
    try:
        frame = pd.read_csv(path, dtype={"date": str, "security_id": str, "factor": str},
                            float_precision="round_trip")
    except FileNotFoundError:
        raise ConfigError(f"{path}: loadings file not found") from None
    missing = {"date", "security_id", "factor", "raw", "normalized"} - set(frame.columns)
    if missing:
        raise LoadingError(f"{path}: missing columns {sorted(missing)}")
    return history_from_frame(frame, panel)


def _panel(config: RunConfig):
    return load_panel(**config.data_paths())


def _history(config: RunConfig, panel, start=None, end=None) -> LoadingHistory:
    if config.loadings is not None:
        return _read_loadings(config.loadings, panel)
    return monthly_loadings(panel, start, end, threads=config.threads)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_loadings(config: RunConfig, args) -> int:
    panel = _panel(config)
    if args.date is not None:
        day = pd.Timestamp(args.date)
        history = monthly_loadings(panel, day, day + pd.offsets.MonthEnd(0), threads=config.threads)
        if not history:
            raise LoadingError(f"no loadings could be computed for the month of {day.date()}")
    else:
        history = monthly_loadings(panel, config.start, config.end, threads=config.threads)
        if not history:
            raise LoadingError("no loadings could be computed in the requested range")
    frame = loadings_frame(history)
    path = write_csv(frame, config.out / "loadings.csv")
    logger.info("wrote %d rows for %d months to %s", len(frame), len(history), path)
    return EXIT_OK


def cmd_fit(config: RunConfig, args) -> int:
    panel = _panel(config)
    history = _history(config, panel, config.start, config.end)
    fits, skipped = fit_range(panel, history, config.start, config.end, config.subset(), config.threads)
    if not fits:
        raise FactorModelError("no trading day in range could be fitted")

    factor_rows, resid_parts, diag = [], [], []
    for fit in fits:
        day = fit.date.strftime("%Y-%m-%d")
        factor_rows.extend((day, t, n, v) for (t, n), v in fit.factor_returns.items())
        resid_parts.append(pd.DataFrame({"date": day, "security_id": fit.residuals.index,
                                         "residual": fit.residuals.to_numpy()}))
        diag.append((day, "ok", fit.n_obs, fit.rank, fit.n_free, fit.condition,
                     fit.weighted_rss, fit.residual_scale, ""))
    for day, reason in skipped:
        diag.append((day.strftime("%Y-%m-%d"), "skipped", 0, 0, 0, float("nan"),
                     float("nan"), float("nan"), reason))
    diag.sort(key=lambda row: row[0])

    out = config.out
    write_csv(pd.DataFrame(factor_rows, columns=["date", "factor_type", "factor_name", "value"]),
              out / "factor_returns.csv")
    write_csv(pd.concat(resid_parts, ignore_index=True), out / "residuals.csv")
    write_csv(pd.DataFrame(diag, columns=["date", "status", "n_obs", "rank", "n_free", "condition",
                                          "weighted_rss", "residual_scale", "reason"]),
              out / "fit_diagnostics.csv")
    if skipped:
        logger.warning("%d day(s) skipped; see fit_diagnostics.csv", len(skipped))
    logger.info("fitted %d days", len(fits))
    return EXIT_OK


def cmd_evaluate(config: RunConfig, args) -> int:
    panel = _panel(config)
    history = _history(config, panel, config.start, config.end)
    sections = CrossSections.build(panel, history, config.start, config.end, config.threads)
    if not sections.designs:
        raise FactorModelError("no trading day in range has a usable cross section")
    options = dict(k=config.folds, seed=config.seed, threads=config.threads,
                   cross_validate=config.cross_validate, sections=sections)
    reports = {
        "factor_groups": factor_group_report(panel, history, **options),
        "style_addition": style_addition_report(panel, history, **options),
        "style_removal": style_removal_report(panel, history, **options),
    }
    for name, report in reports.items():
        write_csv(report, config.out / f"{name}.csv", index=True)
        write_text(config.out / f"{name}.txt", format_report(report) + "\n")
    if sections.skipped:
        logger.warning("%d day(s) without a usable cross section", len(sections.skipped))
    return EXIT_OK


def _specs(config: RunConfig, args) -> list[PortfolioSpec]:
    names = list(config.portfolios)
    specs = []
    for item in names:
        if item in PRESETS:
            specs.append(PortfolioSpec.preset(item, config.base_size, config.selection_size,
                                              config.country_filter))
            continue
        if not Path(item).is_file():
            raise ConfigError(f"unknown portfolio {item!r}: not a preset ({', '.join(PRESETS)}) "
                              "and not an existing spec file")
        spec = PortfolioSpec.from_file(item)
        changes = {}
        if args.base_size is not None:
            changes["base_size"] = args.base_size
        if args.selection_size is not None:
            changes["selection_size"] = args.selection_size
        if changes:
            spec = PortfolioSpec(**{**asdict(spec), **changes})
        specs.append(spec)
    if BASE not in [s.name for s in specs]:
        specs.insert(0, PortfolioSpec.preset(BASE, config.base_size, config.selection_size,
                                             config.country_filter))
    seen = set()
    for s in specs:
        if s.name in seen:
            raise ConfigError(f"portfolio {s.name!r} listed twice")
        seen.add(s.name)
    return specs


def cmd_backtest(config: RunConfig, args) -> int:
    specs = _specs(config, args)
    panel = _panel(config)
    start = config.start if config.start is not None else panel.dates[min(1, len(panel.dates) - 1)]
    needs_loadings = any(f != MARKET_CAP for s in specs for f, _ in s.selectors)
    history = _history(config, panel, start, config.end) if needs_loadings else None
    if config.start is None and history:
        # without an explicit start, begin at the first month that has loadings
        start = max(start, min(history))
    results = run_backtests(specs, panel, history, start, config.end, threads=config.threads)

    out = config.out
    daily = pd.DataFrame({r.name: r.daily_returns for r in results})
    cumulative = pd.DataFrame({r.name: r.cumulative for r in results})
    daily.index = cumulative.index = pd.Index(_date_string(daily.index), name="date")
    write_csv(daily, out / "daily.csv", index=True)
    write_csv(cumulative, out / "cumulative.csv", index=True)
    curve = cumulative.reset_index().melt(id_vars="date", var_name="portfolio", value_name="value")
    write_csv(curve, out / "curve.csv")

    table = returns_table(results)
    write_text(out / "annual.csv", table.to_csv())
    write_csv(table.annotations, out / "annual_annotations.csv", index=True)
    write_text(out / "annual.txt", table.format() + "\n")

    holdings = [(r.name, h.rebalance_date.strftime("%Y-%m-%d"), sid, w)
                for r in results for h in r.holdings for sid, w in h.weights.items()]
    write_csv(pd.DataFrame(holdings, columns=["portfolio", "rebalance_date", "security_id", "weight"]),
              out / "holdings.csv")
    flags = [(r.name, d.strftime("%Y-%m-%d"), sid, reason)
             for r in results for d, sid, reason in r.flags.itertuples(index=False)]
    write_csv(pd.DataFrame(flags, columns=["portfolio", "date", "security_id", "reason"]),
              out / "flags.csv")
    short = sum(len(r.short_rebalances) for r in results)
    if short:
        logger.warning("%d rebalance(s) selected fewer securities than requested", short)
    return EXIT_OK


def cmd_synth(config: RunConfig, args) -> int:
    synth = config.synthetic_config()
    panel, truth = generate(synth)
    out = config.out
    files = {k: p.name for k, p in write_panel(panel, out).items()}
    write_csv(truth.long_frame(), out / "truth.csv")
    frame = loadings_frame(truth.loadings)
    write_csv(frame, out / "loadings.csv")
    files.update(truth="truth.csv", loadings="loadings.csv")
    rows = frame.groupby("date").size()
    manifest = {
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(synth).items()},
        "files": files,
        "loadings_rows": {str(k): int(v) for k, v in rows.items()},
        "fitted_dates": len(truth.fitted_dates),
        "first_fitted_date": _date_string(truth.fitted_dates[:1])[0] if len(truth.fitted_dates) else None,
        "country_factors_degenerate": truth.country_factors_degenerate,
        "industry_factors_degenerate": truth.industry_factors_degenerate,
    }
    write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info("wrote synthetic panel with %d securities and %d days to %s",
                len(panel.securities), len(panel.dates), out)
    return EXIT_OK


def cmd_summary(config: RunConfig, args) -> int:
    panel = _panel(config)
    day = pd.Timestamp(args.date) if args.date is not None else (config.end or panel.dates[-1])
    on_or_before = panel.dates[panel.dates <= day]
    if len(on_or_before) == 0:
        raise ConfigError(f"no trading day on or before {day.date()}")
    day = on_or_before[-1]
    history = _history(config, panel, day, day)
    matrix = history.at(day)
    if matrix is None:
        raise LoadingError(f"no loadings in force on {day.date()}")
    table = country_summary(effective_universe(panel, matrix, day), panel)
    write_csv(table, config.out / "summary.csv", index=True)
    logger.info("country summary for %s", day.date())
    return EXIT_OK


COMMANDS = {
    "loadings": cmd_loadings,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "backtest": cmd_backtest,
    "synth": cmd_synth,
    "summary": cmd_summary,
}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _global_options(suppress: bool) -> argparse.ArgumentParser:
    # shared by the top-level parser and every subcommand, so flags work on either side
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=default, help="flat key = value config file")
    p.add_argument("--out", type=Path, default=default, help="output directory")
    p.add_argument("--seed", type=int, default=default, help="random seed")
    p.add_argument("--threads", type=int, default=default, help="worker threads")
    p.add_argument("-v", "--verbose", action="count", default=default,
                   help="more logging; repeat for debug output")
    return p


def _data_options(p: argparse.ArgumentParser, dates: bool = True) -> None:
    p.add_argument("--data", type=Path, dest="data_dir", help="directory with the four input CSV files")
    p.add_argument("--loadings", type=Path, help="reuse a loadings dump instead of recomputing")
    if dates:
        p.add_argument("--start", help="first date, YYYY-MM-DD")
        p.add_argument("--end", help="last date, YYYY-MM-DD")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factormodel",
        description="Equity factor model: loadings, daily fits, R² evaluation, backtests.",
        parents=[_global_options(suppress=False)],
    )
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    common = _global_options(suppress=True)

    p = sub.add_parser("loadings", parents=[common], help="monthly style loadings -> loadings.csv")
    _data_options(p)
    p.add_argument("--date", help="compute only the month containing this date")

    p = sub.add_parser("fit", parents=[common], help="daily factor returns and residuals")
    _data_options(p)
    p.add_argument("--styles", help="comma-separated style factors, 'all' or 'none'")
    p.add_argument("--no-countries", dest="countries", action="store_false", default=None)
    p.add_argument("--no-industries", dest="industries", action="store_false", default=None)

    p = sub.add_parser("evaluate", parents=[common], help="pooled R² reports")
    _data_options(p)
    p.add_argument("--folds", type=int, help="cross-validation folds")
    p.add_argument("--no-cv", dest="cross_validate", action="store_false", default=None,
                   help="skip the cross-validated metrics")

    p = sub.add_parser("backtest", parents=[common], help="factor-tilted portfolio backtests")
    _data_options(p)
    p.add_argument("--spec", action="append", dest="portfolios",
                   help=f"preset ({', '.join(PRESETS)}) or JSON spec file; repeatable")
    p.add_argument("--base-size", type=int)
    p.add_argument("--selection-size", type=int)
    p.add_argument("--country", dest="country_filter",
                   help="country of the base universe, or 'none' for all")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic panel with planted truth")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a synthetic generator setting, e.g. n_securities=500")

    p = sub.add_parser("summary", parents=[common], help="country counts and market-cap shares")
    _data_options(p, dates=False)
    p.add_argument("--date", help="date of the summary (default: last trading day)")
    return parser


def _date_arg(key: str, text: str | None):
    if text is None:
        return None
    try:
        return pd.Timestamp(pd.to_datetime(text, format="%Y-%m-%d"))
    except (ValueError, TypeError):
        raise ConfigError(f"--{key}: expected YYYY-MM-DD, got {text!r}") from None


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file values overridden by the flags actually given."""
    config = load_config(getattr(args, "config", None))
    ns = vars(args)
    overrides = {k: ns.get(k) for k in ("out", "seed", "threads", "verbose", "data_dir", "loadings",
                                          "folds", "cross_validate", "base_size", "selection_size",
                                          "countries", "industries")}
    overrides["start"] = _date_arg("start", ns.get("start"))
    overrides["end"] = _date_arg("end", ns.get("end"))
    if ns.get("portfolios"):
        overrides["portfolios"] = tuple(ns["portfolios"])
    if ns.get("country_filter") is not None:
        overrides["country_filter"] = None if ns["country_filter"].lower() == "none" else ns["country_filter"]
    if ns.get("styles") is not None:
        overrides["styles"] = parse_styles("--styles", ns["styles"])
    if ns.get("date") is not None:
        args.date = _date_arg("date", ns["date"])
    synthetic = dict(config.synthetic)
    for item in ns.get("set") or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        synthetic[key.strip()] = parse_synthetic_value("synth_" + key.strip(), value)
    if ns.get("seed") is not None:
        synthetic["seed"] = ns["seed"]
    overrides["synthetic"] = synthetic
    return config.updated(overrides).validate()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
        _configure_logging(config.verbose)
        return COMMANDS[args.command](config, args)
    except FactorModelError as exc:
        print(f"factormodel {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except OSError as exc:
        target = f" ({exc.filename})" if exc.filename else ""
        print(f"factormodel {args.command}: error: {exc.strerror or exc}{target}", file=sys.stderr)
        return EXIT_USER
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # boundary: anything else is a bug
        logger.debug("internal error", exc_info=True)
        print(f"factormodel {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
