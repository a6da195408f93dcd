"""
BMI imputation at biomarker measurement times.

A linear mixed model for BMI (random intercept and slope in time) predicts BMI
where it was not recorded; the LMS growth-reference transform converts the
prediction to an age- and sex-specific z-score.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from cohort_data import Cohort, Subject, replace_subjects
from config import BmiLmmConfig, SchemaConfig
from errors import CohortLinkageError, CohortParseError, RangeError
from mixed_model import MixedModelFit, fit_linear_mixed_model
from performance_profiler import profile_imputation

logger = logging.getLogger(__name__)

BMI_FIXED_TERMS = ("intercept", "time", "sage", "sex")
BMI_RANDOM_TERMS = ("intercept", "time")
LMS_COLUMNS = ("sex", "age", "L", "M", "S")
BMI_COLUMNS = ("subject_id", "time", "bmi")


@dataclass(frozen=True)
class BmiRecord:
    subject_id: str
    time: float
    bmi: float


@dataclass
class BmiModelFit:
    """Fitted BMI growth model; phi follows BMI_FIXED_TERMS."""
    phi: Dict[str, float]
    phi_se: Dict[str, float]
    random_effects: Dict[str, np.ndarray]
    random_effects_cov: np.ndarray
    residual_variance: float
    lmm: Optional[MixedModelFit] = None

    def random_effect(self, subject_id: str) -> np.ndarray:
        return self.random_effects.get(subject_id, np.zeros(len(BMI_RANDOM_TERMS)))


@dataclass
class LmsReference:
    """Per-sex L, M, S curves on an age grid."""
    ages: Dict[int, np.ndarray]
    L: Dict[int, np.ndarray]
    M: Dict[int, np.ndarray]
    S: Dict[int, np.ndarray]

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "LmsReference":
        ages, L, M, S = {}, {}, {}, {}
        for sex, rows in frame.groupby("sex", sort=True):
            rows = rows.sort_values("age")
            sex = int(sex)
            a = rows["age"].to_numpy(dtype=float)
            if np.any(np.diff(a) <= 0):
                raise CohortParseError(f"LMS reference ages for sex {sex} are not strictly increasing")
            if np.any(rows["M"].to_numpy(dtype=float) <= 0) or np.any(rows["S"].to_numpy(dtype=float) <= 0):
                raise CohortParseError(f"LMS reference for sex {sex} has non-positive M or S")
            ages[sex] = a
            L[sex] = rows["L"].to_numpy(dtype=float)
            M[sex] = rows["M"].to_numpy(dtype=float)
            S[sex] = rows["S"].to_numpy(dtype=float)
        return cls(ages, L, M, S)

    def lookup(self, age, sex: int):
        """Linearly interpolated (L, M, S) at `age`; no extrapolation."""
        if sex not in self.ages:
            raise RangeError(f"LMS reference has no rows for sex {sex}")
        grid = self.ages[sex]
        age = np.asarray(age, dtype=float)
        outside = (age < grid[0]) | (age > grid[-1])
        if np.any(outside):
            bad = float(np.atleast_1d(age)[np.atleast_1d(outside)][0])
            raise RangeError(f"age {bad:.4f} outside LMS reference range [{grid[0]}, {grid[-1]}] for sex {sex}")
        return (np.interp(age, grid, self.L[sex]), np.interp(age, grid, self.M[sex]),
                np.interp(age, grid, self.S[sex]))


def load_lms_reference(path: Union[str, Path]) -> LmsReference:
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except (FileNotFoundError, pd.errors.EmptyDataError) as e:
        raise CohortParseError(f"cannot read LMS reference: {e}", path=str(path)) from e
    missing = [c for c in LMS_COLUMNS if c not in frame.columns]
    if missing:
        raise CohortParseError(f"missing columns {missing}", path=str(path), line=1)
    return LmsReference.from_frame(frame)


def load_bmi_records(path: Union[str, Path], schema: Optional[SchemaConfig] = None) -> List[BmiRecord]:
    schema = schema or SchemaConfig()
    columns = {name: schema.bmi_columns.get(name, name) for name in BMI_COLUMNS}
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype={columns["subject_id"]: str})
    except (FileNotFoundError, pd.errors.EmptyDataError) as e:
        raise CohortParseError(f"cannot read BMI file: {e}", path=str(path)) from e
    missing = [c for c in columns.values() if c not in frame.columns]
    if missing:
        raise CohortParseError(f"missing columns {missing}", path=str(path), line=1)
    records = []
    for offset, row in enumerate(frame.to_dict("records")):
        line = offset + 2
        try:
            time = float(row[columns["time"]])
            bmi = float(row[columns["bmi"]])
        except (TypeError, ValueError):
            raise CohortParseError("non-numeric time or bmi", path=str(path), line=line) from None
        if not (np.isfinite(bmi) and bmi > 0) or not (np.isfinite(time) and time >= 0):
            raise CohortParseError(f"invalid BMI record (time={time}, bmi={bmi})", path=str(path), line=line)
        records.append(BmiRecord(str(row[columns["subject_id"]]).strip(), time, bmi))
    return records


def bmi_to_zscore(bmi, age, sex: int, reference: LmsReference):
    """LMS z-score: ((bmi/M)^L - 1)/(L S), or ln(bmi/M)/S when L = 0."""
    bmi = np.asarray(bmi, dtype=float)
    if np.any(bmi <= 0):
        raise RangeError("BMI must be positive")
    L, M, S = reference.lookup(age, sex)
    ratio = bmi / M
    with np.errstate(divide="ignore", invalid="ignore"):
        power = (np.power(ratio, L) - 1.0) / (L * S)
    z = np.where(L == 0, np.log(ratio) / S, power)
    return float(z) if np.ndim(z) == 0 else z


def bmi_from_zscore(z, age, sex: int, reference: LmsReference):
    """Inverse LMS transform."""
    z = np.asarray(z, dtype=float)
    L, M, S = reference.lookup(age, sex)
    with np.errstate(divide="ignore", invalid="ignore"):
        power = M * np.power(1.0 + L * S * z, 1.0 / L)
    bmi = np.where(L == 0, M * np.exp(S * z), power)
    return float(bmi) if np.ndim(bmi) == 0 else bmi


def _fixed_row(subject: Subject, t: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones_like(t), t, np.full_like(t, subject.sage), np.full_like(t, float(subject.sex))])


@profile_imputation
def fit_bmi_lmm(records: Sequence[BmiRecord], subjects: Cohort,
                config: Optional[BmiLmmConfig] = None) -> BmiModelFit:
    """ML fit of BMI = phi0 + phi1 t + phi2 SAge + phi3 Sex + u0 + u1 t + e."""
    config = config or BmiLmmConfig()
    known = set(subjects.subject_ids)
    unknown = sorted({r.subject_id for r in records} - known)
    if unknown:
        raise CohortLinkageError(f"BMI records for subjects not in cohort: {unknown[:5]}")
    if not records:
        raise CohortParseError("no BMI records to fit")

    t = np.array([r.time for r in records])
    y = np.array([r.bmi for r in records])
    groups = [r.subject_id for r in records]
    X = np.vstack([_fixed_row(subjects.by_id(r.subject_id), np.array([r.time])) for r in records])
    Z = np.column_stack([np.ones_like(t), t])

    lmm = fit_linear_mixed_model(y, X, Z, groups, BMI_FIXED_TERMS, BMI_RANDOM_TERMS,
                                 drop_constant_covariates=config.drop_constant_covariates,
                                 max_iter=config.max_iter)
    phi = {name: lmm.fixed_effects.get(name, 0.0) for name in BMI_FIXED_TERMS}
    phi_se = {name: lmm.fixed_effects_se.get(name, float("nan")) for name in BMI_FIXED_TERMS}
    logger.info("BMI model fixed effects: " + ", ".join(f"{k}={v:.4f}" for k, v in phi.items()))
    return BmiModelFit(phi, phi_se, dict(lmm.random_effects), lmm.random_effects_cov,
                       lmm.residual_variance, lmm)


def predict_bmi(fit: BmiModelFit, subject: Subject, times: Sequence[float]) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    if np.any(t < 0):
        raise RangeError("prediction times must be >= 0")
    phi = np.array([fit.phi[name] for name in BMI_FIXED_TERMS])
    u = fit.random_effect(subject.subject_id)
    return _fixed_row(subject, t) @ phi + u[0] + u[1] * t


def age_at(subject: Subject, t):
    """Exact age at study time t."""
    return subject.age_entry + (np.asarray(t, dtype=float) - subject.event.entry_time)


@profile_imputation
def impute_cohort_bmiz(cohort: Cohort, records: Sequence[BmiRecord], reference: LmsReference,
                       config: Optional[BmiLmmConfig] = None) -> Cohort:
    """Fill missing BMIZ at every measurement time; observed values are kept."""
    n_missing = sum(1 for s in cohort for r in s.records if r.bmiz is None)
    fit = fit_bmi_lmm(records, cohort, config) if n_missing else None

    subjects = []
    for subject in cohort:
        missing = [j for j, r in enumerate(subject.records) if r.bmiz is None]
        if not missing:
            subjects.append(subject)
            continue
        times = subject.times[missing]
        try:
            z = np.atleast_1d(bmi_to_zscore(predict_bmi(fit, subject, times), age_at(subject, times),
                                            subject.sex, reference))
        except RangeError as e:
            grid = reference.ages.get(subject.sex)
            ages = age_at(subject, times)
            offending = times if grid is None else times[(ages < grid[0]) | (ages > grid[-1])]
            where = float(offending[0]) if offending.size else float(times[0])
            raise RangeError(f"subject {subject.subject_id}: {e}", location=where) from e
        new_records = list(subject.records)
        for j, value in zip(missing, z):
            new_records[j] = replace(new_records[j], bmiz=float(value), bmiz_imputed=True)
        subjects.append(replace(subject, records=tuple(new_records)))

    imputed = replace_subjects(cohort, subjects)
    imputed.provenance["bmiz_imputed"] = n_missing
    logger.info(f"Imputed {n_missing} BMIZ value(s) across {len(cohort)} subjects")
    return imputed
