#!/usr/bin/env python3
"""
End-to-end tests of the command-line pipeline and its exit codes.
"""

import json
import logging
import sys
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

sys.path.insert(0, str(Path(__file__).parent))

from bayes_engine import JointParams, PosteriorDraws, build_basis
from cohort_data import write_cohort
from fixtures import LONG_HEADER, SURV_HEADER, make_cohort, make_subject, require_slow_tests, write_text
from hazard_model import SplineBaseline, SurvivalParams
from longitudinal_model import LongitudinalParams
from main import main
from model_spec import preset

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def _manifest(directory: Path) -> dict:
    return json.loads((directory / "manifest.json").read_text(encoding="utf-8"))


def _write_toy_inputs(directory: Path):
    cohort = make_cohort([
        make_subject("A", times=(0.0, 0.4, 1.0), observed=2.5, age=9.0),
        make_subject("B", times=(0.0, 0.3), observed=1.8, event=1, sex=1, age=13.0, cortico=1),
        make_subject("C", times=(0.0, 0.6, 1.4), observed=3.0, age=11.0),
    ])
    long_path, surv_path = directory / "longitudinal.csv", directory / "survival.csv"
    write_cohort(cohort, str(long_path), str(surv_path))
    return cohort, long_path, surv_path


def _write_fit(cohort, directory: Path, n_draws: int = 6):
    spec = preset("M5")
    basis = build_basis(cohort)
    long_params = LongitudinalParams(spec.longitudinal_terms, np.array([3.7, 0.06, -0.08, 0.2, 0.04]), 0.2)
    surv = SurvivalParams(spec.survival_covariates, np.zeros(len(spec.survival_covariates)), {"area": 0.1},
                          SplineBaseline(basis, np.full(basis.n_basis, -3.0)), 1.0)
    draws = PosteriorDraws.from_params(spec, basis, JointParams(long_params, surv, np.diag([0.09, 0.0025])),
                                       n_draws, cohort.subject_ids, age_mean=cohort.age_mean, age_sd=cohort.age_sd)
    directory.mkdir(parents=True, exist_ok=True)
    draws.to_frame().to_csv(directory / "draws.csv", index=False)
    (directory / "fit.json").write_text(json.dumps(draws.metadata()), encoding="utf-8")
    return draws


def test_unknown_config_key_exits_with_config_code():
    with tempfile.TemporaryDirectory() as tmp:
        assert main(["fit", "--set", "bogus=1", "--output-dir", tmp]) == 2


def test_missing_inputs_still_write_manifest():
    with tempfile.TemporaryDirectory() as tmp:
        assert main(["fit", "--output-dir", tmp]) == 2
        manifest = _manifest(Path(tmp))
        assert manifest["command"] == "fit"
        assert manifest["exit_code"] == 2


def test_malformed_csv_exits_with_data_code():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        long_path = write_text(root / "long.csv", LONG_HEADER + "A,0.0,3.7,0.1\nA,oops,3.8,0.2\n")
        surv_path = write_text(root / "surv.csv", SURV_HEADER + "A,0.0,2.0,0,0,10.0,0,0,0,0,0,0,0,0\n")
        code = main(["fit", "--longitudinal", str(long_path), "--survival", str(surv_path),
                     "--output-dir", str(root / "out")])
        assert code == 3


def test_simulate_writes_cohort_and_manifest():
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp)
        code = main(["simulate", "--seed", "1", "--output-dir", tmp,
                     "--set", "simulation.n_subjects=30", "--set", "simulation.mean_visits=5",
                     "--set", "simulation.target_event_fraction=0.3"])
        assert code == 0
        for name in ("longitudinal.csv", "survival.csv", "bmi.csv", "lms_reference.csv", "truth.csv",
                     "cohort_summary.csv", "manifest.json", "manifest.txt", "jointrisk.log"):
            assert (out / name).exists(), name
        assert len(pd.read_csv(out / "survival.csv")) == 30
        manifest = _manifest(out)
        assert manifest["exit_code"] == 0 and manifest["seed"] == 1
        assert "survival.csv" in manifest["artifacts"]


def test_summary_and_predict_from_saved_fit():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        cohort, long_path, surv_path = _write_toy_inputs(root)
        _write_fit(cohort, root / "fit")

        assert main(["summary", "--fit-dir", str(root / "fit"), "--output-dir", str(root / "summary")]) == 0
        summary = pd.read_csv(root / "summary" / "summary.csv")
        assert summary["parameter"].iloc[-1] == "alpha.area"

        code = main(["predict", "--fit-dir", str(root / "fit"), "--longitudinal", str(long_path),
                     "--survival", str(surv_path), "--subject", "A", "--subject", "NOPE",
                     "--landmark", "0.5", "--horizon", "1.0", "--output-dir", str(root / "pred"),
                     "--set", "prediction.max_draws=3", "--set", "prediction.n_mh_steps=3"])
        assert code == 0
        predictions = pd.read_csv(root / "pred" / "predictions.csv", keep_default_na=False)
        assert list(predictions["subject_id"]) == ["A", "NOPE"]
        row = predictions[predictions["subject_id"] == "A"].iloc[0]
        assert row["error"] == "" and 0.0 < float(row["pi_mean"]) < 1.0
        assert "not in cohort" in predictions[predictions["subject_id"] == "NOPE"].iloc[0]["error"]


def test_compare_needs_two_fits():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        cohort, long_path, surv_path = _write_toy_inputs(root)
        _write_fit(cohort, root / "fit")
        code = main(["compare", "--fit-dir", str(root / "fit"), "--longitudinal", str(long_path),
                     "--survival", str(surv_path), "--output-dir", str(root / "cmp")])
        assert code == 2


def test_simulate_then_fit_pipeline():
    require_slow_tests()
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        assert main(["simulate", "--seed", "4", "--output-dir", str(root / "sim"),
                     "--set", "simulation.n_subjects=40", "--set", "simulation.mean_visits=5",
                     "--set", "simulation.target_event_fraction=0.3",
                     "--set", "simulation.bmiz_missing_rate=0.0"]) == 0
        fit_args = ["--longitudinal", str(root / "sim" / "longitudinal.csv"),
                    "--survival", str(root / "sim" / "survival.csv"),
                    "--set", "mcmc.n_iterations=60", "--set", "mcmc.n_chains=2", "--set", "mcmc.thin=1",
                    "--set", "mcmc.adaptation_window=20", "--set", "mcmc.progress_every=0"]
        assert main(["fit", "--model", "M5", "--output-dir", str(root / "fit")] + fit_args) == 0
        for name in ("draws.csv", "fit.json", "summary.csv", "diagnostics.csv", "diagnostics.txt"):
            assert (root / "fit" / name).exists(), name
        draws = pd.read_csv(root / "fit" / "draws.csv")
        assert len(draws) == 60


if __name__ == "__main__":
    from run_tests import run_module
    sys.exit(run_module(sys.modules[__name__]))
