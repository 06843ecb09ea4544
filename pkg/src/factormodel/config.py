"""Run configuration: a flat ``key = value`` file plus command-line overrides.

Lines starting with ``#`` or ``;`` are comments.  Recognized keys:

``data_dir``
    Directory holding ``prices.csv``, ``fundamentals.csv``,
    ``memberships.csv`` and ``benchmark.csv``.
``prices``, ``fundamentals``, ``memberships``, ``benchmark``
    Individual file paths; override the files in ``data_dir``.
``loadings``
    Existing loadings dump to reuse instead of recomputing.
``start``, ``end``
    Inclusive date range, ``YYYY-MM-DD``.
``styles``
    Comma-separated style factors to include, ``all`` or ``none``.
``countries``, ``industries``
    Whether those blocks enter the fitted model (``true``/``false``).
``seed``, ``folds``, ``cross_validate``
    Cross-validation controls; ``folds`` must be at least 2.
``portfolios``
    Comma-separated preset names or JSON spec files.
``base_size``, ``selection_size``, ``country_filter``
    Backtest universe sizes and country cut (``none`` disables it).
``out``
    Output directory.
``threads``, ``verbose``
    Worker threads and log verbosity (0 warnings, 1 info, 2 debug).
``synth_<field>``
    Any :class:`~factormodel.synthetic.SyntheticConfig` field, for ``synth``.

Relative paths are resolved against the directory of the config file.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import pandas as pd

from factormodel.cross_section import FactorSubset
from factormodel.errors import ConfigError
from factormodel.evaluation import DEFAULT_FOLDS
from factormodel.loadings import STYLE_NAMES
from factormodel.portfolio import DEFAULT_BASE_SIZE, DEFAULT_COUNTRY, DEFAULT_SELECTION_SIZE, PRESETS
from factormodel.synthetic import SyntheticConfig

_SECTION = "run"
_PATH_KEYS = ("data_dir", "prices", "fundamentals", "memberships", "benchmark", "loadings", "out")
_SYNTH_PREFIX = "synth_"


def _parse_bool(key: str, text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected true or false, got {text!r}")


def _parse_int(key: str, text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {text!r}") from None


def _parse_date(key: str, text: str) -> pd.Timestamp:
    try:
        return pd.Timestamp(pd.to_datetime(text, format="%Y-%m-%d"))
    except (ValueError, TypeError):
        raise ConfigError(f"{key}: expected YYYY-MM-DD, got {text!r}") from None


def _parse_list(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def parse_styles(key: str, text: str) -> tuple[str, ...]:
    lowered = text.strip().lower()
    if lowered == "all":
        return STYLE_NAMES
    if lowered in ("none", ""):
        return ()
    styles = _parse_list(text)
    unknown = sorted(set(styles) - set(STYLE_NAMES))
    if unknown:
        raise ConfigError(f"{key}: unknown style factors {unknown}")
    return tuple(s for s in STYLE_NAMES if s in styles)


def parse_synthetic_value(key: str, text: str) -> Any:
    name = key[len(_SYNTH_PREFIX):]
    types = {f.name: f.type for f in fields(SyntheticConfig)}
    if name not in types:
        raise ConfigError(f"unknown synthetic config key {key!r}")
    kind = str(types[name])
    try:
        if kind == "int":
            return int(text)
        if kind == "bool":
            return _parse_bool(key, text)
        if kind == "str":
            return text.strip()
        values = [float(v) for v in _parse_list(text)]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None
    if not values:
        raise ConfigError(f"{key}: empty value")
    if len(values) == 1:
        return values[0]
    if "tuple" not in kind:
        raise ConfigError(f"{key}: expected a single number, got {text!r}")
    return tuple(values)


@dataclass
class RunConfig:
    """Settings shared by every command."""

    data_dir: Path | None = None
    prices: Path | None = None
    fundamentals: Path | None = None
    memberships: Path | None = None
    benchmark: Path | None = None
    loadings: Path | None = None
    start: pd.Timestamp | None = None
    end: pd.Timestamp | None = None
    styles: tuple[str, ...] = STYLE_NAMES
    countries: bool = True
    industries: bool = True
    seed: int = 0
    folds: int = DEFAULT_FOLDS
    cross_validate: bool = True
    portfolios: tuple[str, ...] = tuple(PRESETS)
    base_size: int = DEFAULT_BASE_SIZE
    selection_size: int = DEFAULT_SELECTION_SIZE
    country_filter: str | None = DEFAULT_COUNTRY
    out: Path = Path("out")
    threads: int = 1
    verbose: int = 0
    synthetic: dict = field(default_factory=dict)

    def validate(self) -> RunConfig:
        if self.start is not None and self.end is not None and self.start > self.end:
            raise ConfigError(f"empty date range: start {self.start.date()} after end {self.end.date()}")
        if self.folds < 2:
            raise ConfigError(f"folds must be at least 2, got {self.folds}")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.base_size < 1 or self.selection_size < 1:
            raise ConfigError("base_size and selection_size must be positive")
        self.subset()
        return self

    def subset(self) -> FactorSubset:
        try:
            return FactorSubset(True, self.styles, self.countries, self.industries)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def data_paths(self) -> dict[str, Path]:
        """Paths of the four input tables, or :class:`ConfigError` if any is unset."""
        names = {"prices": "prices.csv", "fundamentals": "fundamentals.csv",
                 "memberships": "memberships.csv", "benchmark": "benchmark.csv"}
        out = {}
        for key, filename in names.items():
            path = getattr(self, key)
            if path is None and self.data_dir is not None:
                path = self.data_dir / filename
            if path is None:
                raise ConfigError(f"no input data: set data_dir or {key}")
            out[f"{key}_path"] = path
        return out

    def synthetic_config(self) -> SyntheticConfig:
        values = dict(self.synthetic)
        values.setdefault("seed", self.seed)
        return SyntheticConfig.from_mapping(values)

    def updated(self, overrides: Mapping[str, Any]) -> RunConfig:
        """Copy with every non-``None`` override applied."""
        known = {f.name for f in fields(self)}
        changes = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(changes) - known
        if unknown:
            raise ConfigError(f"unknown settings {sorted(unknown)}")
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return RunConfig(**values)


def parse_config_text(text: str, base_dir: Path | None = None, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=None, strict=True)
    try:
        parser.read_string(f"[{_SECTION}]\n{text}", source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if parser.sections() != [_SECTION]:
        raise ConfigError(f"{source}: sections are not supported; use flat key = value lines")

    base_dir = base_dir or Path(".")
    values: dict[str, Any] = {}
    synthetic: dict[str, Any] = {}
    for key, raw in parser.items(_SECTION):
        text_value = raw.strip()
        if key in _PATH_KEYS:
            path = Path(text_value)
            values[key] = path if path.is_absolute() else base_dir / path
        elif key in ("start", "end"):
            values[key] = _parse_date(key, text_value)
        elif key == "styles":
            values[key] = parse_styles(key, text_value)
        elif key in ("countries", "industries", "cross_validate"):
            values[key] = _parse_bool(key, text_value)
        elif key in ("seed", "folds", "base_size", "selection_size", "threads", "verbose"):
            values[key] = _parse_int(key, text_value)
        elif key == "portfolios":
            values[key] = _parse_list(text_value)
        elif key == "country_filter":
            values[key] = None if text_value.lower() == "none" else text_value
        elif key.startswith(_SYNTH_PREFIX):
            synthetic[key[len(_SYNTH_PREFIX):]] = parse_synthetic_value(key, text_value)
        else:
            raise ConfigError(f"{source}: unknown key {key!r}")
    config = RunConfig(**values, synthetic=synthetic)
    return config


def load_config(path: str | Path | None) -> RunConfig:
    """Read a config file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config_text(text, base_dir=path.parent, source=str(path))
