from __future__ import annotations

from pathlib import Path

import pandas as pd
import pytest

from factormodel.cli import build_parser, resolve_config
from factormodel.config import RunConfig, load_config, parse_config_text
from factormodel.errors import ConfigError
from factormodel.loadings import STYLE_NAMES


def test_defaults():
    config = RunConfig().validate()
    assert config.styles == STYLE_NAMES and config.folds == 10 and config.base_size == 500
    assert config.selection_size == 125 and config.country_filter == "US"


def test_typed_values(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# comment\n"
        "data_dir = data\n"
        "start = 2021-01-04\n"
        "end = 2021-06-30\n"
        "styles = Size, Beta\n"
        "industries = false\n"
        "seed = 7\n"
        "folds = 5\n"
        "portfolios = Base, Value, specs/custom.json\n"
        "country_filter = none\n"
        "synth_n_securities = 250\n"
        "synth_style_factor_vols = 0.01, 0.02, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01\n"
        "synth_mode = raw\n"
    )
    config = load_config(path).validate()
    assert config.data_dir == tmp_path / "data"
    assert config.start == pd.Timestamp("2021-01-04") and config.end == pd.Timestamp("2021-06-30")
    assert config.styles == ("Beta", "Size")  # canonical order
    assert config.industries is False and config.countries is True
    assert (config.seed, config.folds) == (7, 5)
    assert config.portfolios == ("Base", "Value", "specs/custom.json")
    assert config.country_filter is None
    synth = config.synthetic_config()
    assert synth.n_securities == 250 and synth.mode == "raw" and synth.seed == 7
    assert synth.style_factor_vols[1] == 0.02
    assert config.data_paths()["prices_path"] == tmp_path / "data" / "prices.csv"


@pytest.mark.parametrize("text, message", [
    ("colour = blue", "unknown key"),
    ("folds = ten", "expected an integer"),
    ("countries = maybe", "expected true or false"),
    ("start = 04/01/2021", "expected YYYY-MM-DD"),
    ("styles = Beta, Momentum", "unknown style factors"),
    ("synth_n_secs = 3", "unknown synthetic config key"),
    ("synth_market_vol = 0.1, 0.2", "expected a single number"),
    ("[extra]\nseed = 1", "sections are not supported"),
    ("seed = 1\nseed = 2", "seed"),
])
def test_parse_errors(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_config_text(text)


@pytest.mark.parametrize("text", ["start = 2021-02-01\nend = 2021-01-01", "folds = 1", "threads = 0"])
def test_invariants(text):
    with pytest.raises(ConfigError):
        parse_config_text(text).validate()


def test_missing_file():
    with pytest.raises(ConfigError, match="config file not found"):
        load_config("/nonexistent/run.cfg")


def test_no_input_data():
    with pytest.raises(ConfigError, match="no input data"):
        RunConfig().data_paths()


def test_flags_override_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 3\nfolds = 4\nout = results\nbase_size = 100\nstart = 2021-01-04\n")
    args = build_parser().parse_args(["evaluate", "--config", str(path), "--folds", "6", "--seed", "9"])
    config = resolve_config(args)
    assert (config.folds, config.seed, config.base_size) == (6, 9, 100)
    assert config.out == tmp_path / "results" and config.start == pd.Timestamp("2021-01-04")


def test_global_flags_either_side(tmp_path):
    before = build_parser().parse_args(["--out", str(tmp_path), "--threads", "3", "fit"])
    after = build_parser().parse_args(["fit", "--out", str(tmp_path), "--threads", "3"])
    assert resolve_config(before).threads == resolve_config(after).threads == 3
    assert resolve_config(before).out == resolve_config(after).out == Path(tmp_path)


def test_synth_set_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("synth_n_securities = 100\nsynth_n_days = 20\n")
    args = build_parser().parse_args(["synth", "--config", str(path), "--set", "n_days=30", "--seed", "4"])
    synth = resolve_config(args).synthetic_config()
    assert (synth.n_securities, synth.n_days, synth.seed) == (100, 30, 4)
    with pytest.raises(ConfigError, match="KEY=VALUE"):
        resolve_config(build_parser().parse_args(["synth", "--set", "n_days"]))
