#!/usr/bin/env python3
"""
Joint-model risk engine
Command-line orchestrator for the staged analysis:
simulate -> impute -> fit -> summary -> predict -> evaluate -> compare.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from bayes_engine import PosteriorDraws, run_mcmc
from cohort_data import Cohort, describe_cohort, load_cohort, validate_cohort, write_cohort
from config import RunConfig, config as app_config, load_run_config
from dynamic_prediction import PREDICTION_COLUMNS, predict_batch
from errors import ConfigError, ConvergenceError, JointRiskError
from evaluation import compare_models, cross_validate, kaplan_meier, km_table
from growth_imputation import impute_cohort_bmiz, load_bmi_records, load_lms_reference
from mcmc_diagnostics import diagnostics_table, max_rhat, summarize_posterior
from performance_profiler import ComponentProfiler, profiler
from run_artifacts import ArtifactWriter, RunManifest
from simulation import calibrate_baseline_level, default_truth, simulate_cohort, write_sim_cohort

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "impute", "fit", "summary", "predict", "evaluate", "compare")


def setup_logging(output_dir: Optional[Path], level: str = "INFO"):
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(output_dir / "jointrisk.log"))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


class JointRiskPipeline:
    """Runs one subcommand and records its artifacts and manifest."""

    def __init__(self, run_config: RunConfig, command: str):
        self.config = run_config
        self.command = command
        self.writer = ArtifactWriter(run_config.output_dir)
        self.manifest = RunManifest(command, run_config.model_dump(mode="json", by_alias=True), run_config.seed)

    # inputs

    def load_cohort(self) -> Cohort:
        if not self.config.longitudinal_path or not self.config.survival_path:
            raise ConfigError(f"'{self.command}' needs longitudinal_path and survival_path")
        for path in (self.config.longitudinal_path, self.config.survival_path):
            self.manifest.record_input(path)
        cohort = load_cohort(self.config.longitudinal_path, self.config.survival_path, self.config.schema_)
        excluded = cohort.provenance.get("excluded", [])
        if excluded:
            self.manifest.notes.append(f"{len(excluded)} subject(s) excluded at load")
        return cohort

    def load_fit(self, fit_dir: Optional[str]) -> PosteriorDraws:
        if not fit_dir:
            raise ConfigError(f"'{self.command}' needs fit_dir")
        directory = Path(fit_dir)
        draws_path, meta_path = directory / "draws.csv", directory / "fit.json"
        missing = [str(p) for p in (draws_path, meta_path) if not p.is_file()]
        if missing:
            raise ConfigError(f"fit artifacts missing: {missing}")
        self.manifest.record_input(str(draws_path))
        self.manifest.record_input(str(meta_path))
        metadata = json.loads(meta_path.read_text(encoding="utf-8"))
        return PosteriorDraws.from_frame(pd.read_csv(draws_path), metadata)

    def _mcmc_config(self):
        return self.config.mcmc.model_copy(update={"seed": self.config.seed, "threads": self.config.threads})

    # commands

    def cmd_simulate(self):
        sim_config = self.config.simulation
        truth = default_truth(sim_config.association).with_config(sim_config)
        if sim_config.target_event_fraction is not None:
            truth = calibrate_baseline_level(truth, sim_config.n_subjects, self.config.seed,
                                             sim_config.target_event_fraction)
        sim = simulate_cohort(truth, sim_config.n_subjects, self.config.seed)
        paths = write_sim_cohort(sim, self.config.output_dir)
        self.manifest.artifacts.extend(p.name for p in paths.values())
        report = validate_cohort(sim.cohort)
        if not report.ok:
            self.manifest.notes.append(f"simulated cohort has violations: {report.counts}")
        self.writer.save({"cohort_summary.csv": describe_cohort(sim.cohort)})

    def cmd_impute(self):
        cohort = self.load_cohort()
        if not self.config.bmi_path or not self.config.lms_reference_path:
            raise ConfigError("'impute' needs bmi_path and lms_reference_path")
        self.manifest.record_input(self.config.bmi_path)
        self.manifest.record_input(self.config.lms_reference_path)
        records = load_bmi_records(self.config.bmi_path, self.config.schema_)
        reference = load_lms_reference(self.config.lms_reference_path)
        imputed = impute_cohort_bmiz(cohort, records, reference, self.config.bmi_lmm)
        out = Path(self.config.output_dir)
        write_cohort(imputed, str(out / "longitudinal.csv"), str(out / "survival.csv"))
        self.manifest.artifacts.extend(["longitudinal.csv", "survival.csv"])
        self.manifest.notes.append(f"{imputed.provenance.get('bmiz_imputed', 0)} BMIZ value(s) imputed")

    def _write_fit_reports(self, draws: PosteriorDraws) -> pd.DataFrame:
        level = self.config.prediction.credible_level
        diagnostics = diagnostics_table(draws, self.config.mcmc.rhat_threshold)
        lines = [f"model: {draws.spec.name}", f"draws: {draws.n_draws} from {draws.n_chains} chain(s)",
                 f"max R-hat: {max_rhat(diagnostics)}", "acceptance rates:"]
        for chain, rates in draws.acceptance.items():
            lines.append(f"  {chain}: " + ", ".join(f"{k}={v:.3f}" for k, v in rates.items()))
        lines.append("timing:")
        for component, stats in profiler.get_all_stats().items():
            lines.append(f"  {component}: {stats['total_operations']} ops, {stats['total_duration_ms'] / 1000:.2f}s")
        lines.append("")
        lines.append(diagnostics.to_string(index=False))
        self.writer.save({
            "summary.csv": summarize_posterior(draws, level),
            "summary_full.csv": summarize_posterior(draws, level, include_nuisance=True),
            "diagnostics.csv": diagnostics,
            "diagnostics.txt": "\n".join(lines) + "\n",
        })
        return diagnostics

    def _check_convergence(self, diagnostics: pd.DataFrame):
        bad = diagnostics.loc[~diagnostics["converged"], "parameter"].tolist()
        if not bad:
            return
        message = f"{len(bad)} parameter(s) exceed R-hat {self.config.mcmc.rhat_threshold}: {bad[:10]}"
        self.manifest.notes.append(message)
        if self.config.fail_on_nonconvergence:
            raise ConvergenceError(message)
        logger.warning(message)

    def cmd_fit(self):
        cohort = self.load_cohort()
        spec = self.config.model_spec()
        draws = run_mcmc(cohort, spec, self.config.prior, self._mcmc_config(), self.config.spline)
        self.writer.save({"draws.csv": draws.to_frame(), "fit.json": draws.metadata()})
        diagnostics = self._write_fit_reports(draws)
        self._check_convergence(diagnostics)

    def cmd_summary(self):
        draws = self.load_fit(self.config.fit_dir)
        diagnostics = self._write_fit_reports(draws)
        self._check_convergence(diagnostics)

    def cmd_predict(self):
        draws = self.load_fit(self.config.fit_dir)
        cohort = self.load_cohort()
        wanted = self.config.subjects or cohort.subject_ids
        known = set(cohort.subject_ids)
        horizons = sorted(set([self.config.horizon] + list(self.config.dt_grid)))
        batch = predict_batch(draws, [cohort.by_id(sid) for sid in wanted if sid in known],
                              self.config.landmarks, horizons, self.config.prediction, self.config.seed,
                              self.config.threads)
        unknown_rows = [{"subject_id": sid, "t_L": t_L, "dt": dt, "pi_mean": float("nan"), "pi_lo": float("nan"),
                         "pi_hi": float("nan"), "error": f"subject {sid} not in cohort"}
                        for sid in wanted if sid not in known for t_L in self.config.landmarks for dt in horizons]
        frame = pd.concat([batch.frame, pd.DataFrame(unknown_rows, columns=PREDICTION_COLUMNS)], ignore_index=True)
        outputs: Dict[str, object] = {"predictions.csv": frame[frame["dt"] == self.config.horizon]}
        if self.config.dt_grid:
            outputs["curves.csv"] = frame
        if self.config.write_per_draw:
            outputs["predictions_per_draw.csv"] = batch.per_draw
        self.writer.save(outputs)
        n_failed = int((frame["error"] != "").sum())
        if n_failed:
            self.manifest.notes.append(f"{n_failed} prediction row(s) carry errors")

    def cmd_evaluate(self):
        cohort = self.load_cohort()
        spec = self.config.model_spec()
        report = cross_validate(cohort, spec, self.config)
        curve = kaplan_meier(cohort.observed_times, cohort.event_flags, cohort.entry_times)
        self.writer.save({
            "metrics.csv": report.values,
            "metrics_summary.csv": report.summary(),
            "metrics_table.csv": report.table(),
            "km.csv": km_table(curve),
        })

    def cmd_compare(self):
        if len(self.config.fit_dirs) < 2:
            raise ConfigError("'compare' needs at least 2 entries in fit_dirs")
        cohort = self.load_cohort()
        fits = {}
        for fit_dir in self.config.fit_dirs:
            draws = self.load_fit(fit_dir)
            name = draws.spec.name if draws.spec.name not in fits else f"{draws.spec.name}@{fit_dir}"
            fits[name] = draws
        evaluation = self.config.evaluation
        table = compare_models(fits, cohort, evaluation.pointwise, evaluation.n_marginal_samples)
        self.writer.save({"comparison.csv": table})

    def run(self) -> int:
        handler = getattr(self, f"cmd_{self.command}")
        logger.info(f"Running '{self.command}' (seed {self.config.seed}, threads {self.config.threads})")
        with ComponentProfiler("cli", self.command):
            handler()
        return 0

    def finish(self, exit_code: int):
        self.manifest.finish(exit_code)
        profiler.export_metrics(str(self.writer.path("timings.json")))
        self.manifest.artifacts.append("timings.json")
        self.writer.save_manifest(self.manifest)
        profiler.log_summary()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Joint longitudinal-survival risk engine")
    parser.add_argument("command", choices=COMMANDS, help="Pipeline stage to run")
    parser.add_argument("--config", help="JSON run configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config value (dotted key, JSON value)")
    parser.add_argument("--seed", type=int, help="Master random seed")
    parser.add_argument("--threads", type=int, help="Worker thread budget")
    parser.add_argument("--output-dir", help="Directory for all artifacts")
    parser.add_argument("--model", help="Model preset (M1-M7)")
    parser.add_argument("--longitudinal", dest="longitudinal_path", help="Longitudinal CSV")
    parser.add_argument("--survival", dest="survival_path", help="Survival CSV")
    parser.add_argument("--bmi", dest="bmi_path", help="BMI records CSV")
    parser.add_argument("--lms", dest="lms_reference_path", help="LMS growth reference CSV")
    parser.add_argument("--fit-dir", action="append", dest="fit_dirs", help="Fit directory (repeat for compare)")
    parser.add_argument("--subject", action="append", dest="subjects", help="Subject to predict (repeatable)")
    parser.add_argument("--landmark", action="append", type=float, dest="landmarks", help="Landmark time (repeatable)")
    parser.add_argument("--horizon", type=float, help="Prediction horizon in years")
    parser.add_argument("--log-level", default=app_config.log_level, help="Logging level")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    explicit = {
        "seed": args.seed,
        "threads": args.threads,
        "output_dir": args.output_dir,
        "model": args.model,
        "longitudinal_path": args.longitudinal_path,
        "survival_path": args.survival_path,
        "bmi_path": args.bmi_path,
        "lms_reference_path": args.lms_reference_path,
        "subjects": args.subjects,
        "landmarks": args.landmarks,
        "horizon": args.horizon,
    }
    if args.fit_dirs:
        explicit["fit_dirs"] = args.fit_dirs
        explicit["fit_dir"] = args.fit_dirs[0]
    return load_run_config(args.config, args.overrides, **explicit)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run_config = resolve_config(args)
    except JointRiskError as e:
        setup_logging(None, args.log_level)
        logger.error(f"Configuration error: {e}")
        return e.exit_code

    output_dir = Path(run_config.output_dir)
    setup_logging(output_dir, args.log_level)
    pipeline = JointRiskPipeline(run_config, args.command)
    try:
        exit_code = pipeline.run()
    except JointRiskError as e:
        logger.error(f"{type(e).__name__}: {e}", exc_info=True)
        exit_code = e.exit_code
    except Exception as e:
        logger.error(f"Unexpected failure: {e}", exc_info=True)
        exit_code = 1
    pipeline.finish(exit_code)
    logger.info(f"'{args.command}' finished with exit code {exit_code}; artifacts in {output_dir}")
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
