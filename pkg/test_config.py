#!/usr/bin/env python3
"""
Tests for run configuration loading, overrides and model presets.
"""

import json
import logging
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from config import McmcConfig, RunConfig, apply_overrides, load_run_config
from errors import ConfigError
from model_spec import ModelSpec, all_presets, preset

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def _expect_config_error(fn, fragment: str = ""):
    try:
        fn()
        assert False, "expected ConfigError"
    except ConfigError as e:
        assert fragment in str(e), str(e)
        assert e.exit_code == 2


def test_defaults():
    config = RunConfig()
    assert config.model_spec().name == "M5"
    assert config.mcmc.n_chains == 4
    assert config.mcmc.n_burn_in == 45000
    assert config.evaluation.landmarks == [0.5, 2.0]
    assert config.spline.n_interior_knots == 9


def test_overrides_parse_json_values():
    config = load_run_config(overrides=["mcmc.n_chains=2", "model=M3", "evaluation.horizons=[1, 2]",
                                        "schema.study_origin=\"2019-04-01\""])
    assert config.mcmc.n_chains == 2
    assert config.model_spec().association == ("value",)
    assert config.evaluation.horizons == [1.0, 2.0]
    assert str(config.schema_.study_origin) == "2019-04-01"


def test_explicit_values_beat_file_values():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "run.json"
        path.write_text(json.dumps({"seed": 3, "mcmc": {"thin": 5}}), encoding="utf-8")
        config = load_run_config(str(path), seed=9, threads=None)
        assert config.seed == 9
        assert config.mcmc.thin == 5


def test_unknown_keys_are_rejected():
    _expect_config_error(lambda: load_run_config(overrides=["mcmc.bogus=1"]), "unknown config key 'mcmc.bogus'")
    _expect_config_error(lambda: load_run_config(overrides=["bogus=1"]), "unknown config key 'bogus'")


def test_invalid_values_are_rejected():
    _expect_config_error(lambda: load_run_config(overrides=["prior.beta_sd=0"]), "beta_sd")
    _expect_config_error(lambda: load_run_config(overrides=["mcmc.burn_in_fraction=1.0"]), "burn_in_fraction")
    _expect_config_error(lambda: load_run_config(overrides=["evaluation.pointwise=\"loo\""]), "pointwise")
    _expect_config_error(lambda: load_run_config(overrides=["mcmc.d_update=\"slice\""]), "d_update")
    assert load_run_config(overrides=["mcmc.d_update=\"mh\""]).mcmc.d_update == "mh"


def test_malformed_overrides_and_files():
    _expect_config_error(lambda: apply_overrides({}, ["no_equals_sign"]), "key=value")
    _expect_config_error(lambda: apply_overrides({"seed": 1}, ["seed.inner=2"]), "non-mapping")
    _expect_config_error(lambda: load_run_config("/nonexistent/run.json"), "not found")
    with tempfile.TemporaryDirectory() as tmp:
        broken = Path(tmp) / "broken.json"
        broken.write_text("{not json", encoding="utf-8")
        _expect_config_error(lambda: load_run_config(str(broken)), "not valid JSON")
        listed = Path(tmp) / "list.json"
        listed.write_text("[1, 2]", encoding="utf-8")
        _expect_config_error(lambda: load_run_config(str(listed)), "JSON object")


def test_mcmc_burn_in():
    assert McmcConfig(n_iterations=100, burn_in_fraction=0.5).n_burn_in == 50
    assert McmcConfig(n_iterations=101, burn_in_fraction=0.5).n_burn_in == 50


def test_presets_cover_association_grid():
    expected = {
        "M1": ("value", "slope", "area"), "M2": ("value", "slope"), "M3": ("value",), "M4": ("slope",),
        "M5": ("area",), "M6": ("value", "area"), "M7": ("slope", "area"),
    }
    presets = all_presets()
    assert {name: spec.association for name, spec in presets.items()} == expected
    assert len({spec.survival_covariates for spec in presets.values()}) == 1
    assert preset("m4").name == "M4"
    _expect_config_error(lambda: preset("M9"), "M9")


def test_model_spec_orders_terms_canonically():
    spec = ModelSpec(association=("area", "value"), longitudinal_terms=("bmiz", "intercept", "time"))
    assert spec.association == ("value", "area")
    assert spec.longitudinal_terms == ("intercept", "time", "bmiz")
    assert spec.uses_bmiz
    for bad in ({"association": ("curvature",)}, {"longitudinal_terms": ("time",)},
                {"survival_covariates": ("smoking",)}):
        try:
            ModelSpec(**bad)
            assert False, f"{bad} must be rejected"
        except ValueError:
            pass


if __name__ == "__main__":
    from run_tests import run_module
    sys.exit(run_module(sys.modules[__name__]))
