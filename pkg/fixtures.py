"""
Shared builders for the test modules.
"""

import os
import unittest
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from cohort_data import Cohort, EventRecord, LongitudinalRecord, Subject
from config import McmcConfig
from model_spec import SURVIVAL_COVARIATES
from simulation import calibrate_baseline_level, default_truth, simulate_cohort

LONG_HEADER = "subject_id,time,log_creatinine,bmiz\n"
SURV_HEADER = "subject_id,entry_time,event_time,event,sex,age_entry," + ",".join(SURVIVAL_COVARIATES) + "\n"


def make_subject(subject_id: str = "S1", times: Sequence[float] = (0.0, 0.5, 1.0),
                 values: Optional[Sequence[float]] = None, bmiz: Optional[Sequence[Optional[float]]] = None,
                 entry: float = 0.0, observed: float = 2.0, event: int = 0, sex: int = 0,
                 age: float = 10.0, sage: float = 0.0, **covariates) -> Subject:
    values = list(values) if values is not None else [3.7] * len(times)
    bmiz = list(bmiz) if bmiz is not None else [0.0] * len(times)
    records = tuple(LongitudinalRecord(subject_id, float(t), float(v), None if z is None else float(z))
                    for t, v, z in zip(times, values, bmiz))
    baseline = {c: int(covariates.get(c, 0)) for c in SURVIVAL_COVARIATES}
    return Subject(subject_id, sex, age, sage, baseline, records, EventRecord(subject_id, entry, observed, event))


def make_cohort(subjects: Sequence[Subject], age_mean: float = 10.0, age_sd: float = 2.0) -> Cohort:
    return Cohort(tuple(subjects), age_mean, age_sd)


def quick_mcmc(n_iterations: int = 300, n_chains: int = 2, seed: int = 7, **overrides) -> McmcConfig:
    settings = dict(n_chains=n_chains, n_iterations=n_iterations, thin=1, adaptation_window=50,
                    seed=seed, threads=1, progress_every=0)
    settings.update(overrides)
    return McmcConfig(**settings)


def survival_row(subject_id: str, entry: float, observed: float, event: int, sex: int, age: float,
                 **covariates) -> str:
    flags = ",".join(str(int(covariates.get(c, 0))) for c in SURVIVAL_COVARIATES)
    return f"{subject_id},{entry},{observed},{event},{sex},{age},{flags}\n"


def write_text(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def require_slow_tests():
    if os.getenv("JOINTRISK_RUN_SLOW_TESTS", "0") != "1":
        raise unittest.SkipTest("set JOINTRISK_RUN_SLOW_TESTS=1 to run")


def small_simulation(n: int = 30, seed: int = 1, association: Sequence[str] = ("area",),
                     event_fraction: float = 0.3, mean_visits: float = 5.0, horizon: float = 4.0):
    """Short simulated cohort with enough events to place spline knots."""
    truth = replace(default_truth(association), mean_visits=mean_visits, study_horizon=horizon)
    truth = calibrate_baseline_level(truth, n, seed, event_fraction)
    return simulate_cohort(truth, n, seed)
