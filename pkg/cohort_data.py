"""
Cohort data model for linked longitudinal biomarker and survival data.
Loads the two CSV inputs, enforces the per-subject invariants and keeps the
age standardization used by every downstream design matrix.
"""

import logging
import math
from collections import Counter, OrderedDict
from dataclasses import dataclass, field, replace
from datetime import date
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import SchemaConfig
from errors import CohortDataError, CohortLinkageError, CohortParseError
from model_spec import SURVIVAL_COVARIATES

logger = logging.getLogger(__name__)

LONGITUDINAL_COLUMNS: Tuple[str, ...] = ("subject_id", "time", "log_creatinine", "bmiz")
SURVIVAL_COLUMNS: Tuple[str, ...] = (
    "subject_id", "entry_time", "event_time", "event", "sex", "age_entry",
) + SURVIVAL_COVARIATES
IMPUTED_FLAG_COLUMN = "bmiz_imputed"


@dataclass(frozen=True)
class LongitudinalRecord:
    """One biomarker measurement y_ij at time s_ij (years since study origin)."""
    subject_id: str
    time: float
    value: float
    bmiz: Optional[float] = None
    bmiz_imputed: bool = False

    @property
    def covariates(self) -> Dict[str, Optional[float]]:
        return {"bmiz": self.bmiz}


@dataclass(frozen=True)
class EventRecord:
    subject_id: str
    entry_time: float
    observed_time: float
    event: int


@dataclass(frozen=True)
class Subject:
    subject_id: str
    sex: int  # 0 male, 1 female
    age_entry: float
    sage: float
    baseline: Dict[str, int]
    records: Tuple[LongitudinalRecord, ...]
    event: EventRecord

    @cached_property
    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records], dtype=float)

    @cached_property
    def values(self) -> np.ndarray:
        return np.array([r.value for r in self.records], dtype=float)

    @cached_property
    def bmiz(self) -> np.ndarray:
        return np.array([np.nan if r.bmiz is None else r.bmiz for r in self.records], dtype=float)

    @property
    def n_records(self) -> int:
        return len(self.records)

    @property
    def has_complete_bmiz(self) -> bool:
        return all(r.bmiz is not None for r in self.records)

    def covariate_vector(self, names: Sequence[str]) -> np.ndarray:
        return np.array([self.baseline[name] for name in names], dtype=float)

    def history(self, landmark: float) -> "Subject":
        """Subject restricted to measurements taken at or before `landmark`."""
        kept = tuple(r for r in self.records if r.time <= landmark)
        return replace(self, records=kept)


@dataclass(frozen=True)
class Cohort:
    subjects: Tuple[Subject, ...]
    age_mean: float
    age_sd: float
    provenance: Dict[str, object] = field(default_factory=dict)
    after_event_tolerance: float = 1e-6

    def __len__(self) -> int:
        return len(self.subjects)

    def __iter__(self) -> Iterator[Subject]:
        return iter(self.subjects)

    @cached_property
    def _index(self) -> Dict[str, int]:
        return {s.subject_id: i for i, s in enumerate(self.subjects)}

    @property
    def subject_ids(self) -> List[str]:
        return [s.subject_id for s in self.subjects]

    @property
    def n_records(self) -> int:
        return sum(s.n_records for s in self.subjects)

    def by_id(self, subject_id: str) -> Subject:
        try:
            return self.subjects[self._index[subject_id]]
        except KeyError:
            raise KeyError(f"Subject '{subject_id}' not in cohort") from None

    def standardize_age(self, age: float) -> float:
        """Apply the training-cohort age transform to a new subject."""
        return (age - self.age_mean) / self.age_sd

    @property
    def observed_times(self) -> np.ndarray:
        return np.array([s.event.observed_time for s in self.subjects], dtype=float)

    @property
    def event_flags(self) -> np.ndarray:
        return np.array([s.event.event for s in self.subjects], dtype=int)

    @property
    def entry_times(self) -> np.ndarray:
        return np.array([s.event.entry_time for s in self.subjects], dtype=float)


@dataclass
class Violation:
    subject_id: Optional[str]
    invariant: str
    message: str


@dataclass
class ValidationReport:
    violations: List[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def counts(self) -> Dict[str, int]:
        return dict(Counter(v.invariant for v in self.violations))

    def add(self, subject_id: Optional[str], invariant: str, message: str):
        self.violations.append(Violation(subject_id, invariant, message))


def standardize(values: Iterable[float]) -> Tuple[np.ndarray, float, float]:
    """Center and scale by the sample mean and sample standard deviation."""
    x = np.asarray(list(values), dtype=float)
    if x.size < 2:
        raise CohortDataError("standardize needs at least two values")
    mean = float(np.mean(x))
    sd = float(np.std(x, ddof=1))
    if not sd > 0:
        raise CohortDataError("standardize received constant input (sd = 0)")
    return (x - mean) / sd, mean, sd


def _column_map(defaults: Sequence[str], overrides: Dict[str, str]) -> Dict[str, str]:
    return {name: overrides.get(name, name) for name in defaults}


def _read_table(path: Path, required: Dict[str, str], label: str) -> pd.DataFrame:
    if not path.exists():
        raise CohortParseError(f"{label} file does not exist", path=str(path))
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise CohortParseError(f"{label} file is empty", path=str(path), line=1) from None
    except pd.errors.ParserError as e:
        raise CohortParseError(f"{label} file could not be parsed: {e}", path=str(path)) from e
    missing = [col for col in required.values() if col not in frame.columns]
    if missing:
        raise CohortParseError(f"missing columns {missing}", path=str(path), line=1)
    if frame.empty:
        raise CohortParseError(f"{label} file has a header but no data rows", path=str(path), line=2)
    return frame


class _RowParser:
    """Typed field access that reports the offending CSV line."""

    def __init__(self, path: Path, schema: SchemaConfig):
        self.path = str(path)
        self.schema = schema

    def text(self, raw: str, line: int, name: str) -> str:
        value = raw.strip()
        if not value:
            raise CohortParseError(f"empty '{name}'", path=self.path, line=line)
        return value

    def real(self, raw: str, line: int, name: str, optional: bool = False) -> Optional[float]:
        value = raw.strip()
        if not value:
            if optional:
                return None
            raise CohortParseError(f"empty '{name}'", path=self.path, line=line)
        try:
            return float(value)
        except ValueError:
            raise CohortParseError(f"'{name}' is not a number: {value!r}", path=self.path, line=line) from None

    def integer(self, raw: str, line: int, name: str) -> int:
        number = self.real(raw, line, name)
        if not float(number).is_integer():
            raise CohortParseError(f"'{name}' is not an integer: {raw!r}", path=self.path, line=line)
        return int(number)

    def time(self, raw: str, line: int, name: str) -> float:
        if self.schema.study_origin is None:
            return self.real(raw, line, name)
        try:
            when = date.fromisoformat(raw.strip())
        except ValueError:
            raise CohortParseError(f"'{name}' is not an ISO date: {raw!r}", path=self.path, line=line) from None
        return (when - self.schema.study_origin).days / self.schema.days_per_year


def _order_records(subject_id: str, records: List[LongitudinalRecord], observed_time: float,
                   schema: SchemaConfig) -> Tuple[List[LongitudinalRecord], int]:
    """Sort, separate tied times, and truncate measurements past follow-up."""
    records = sorted(records, key=lambda r: r.time)
    ordered: List[LongitudinalRecord] = []
    for record in records:
        if ordered and record.time <= ordered[-1].time:
            record = replace(record, time=ordered[-1].time + schema.duplicate_time_offset)
        ordered.append(record)
    limit = observed_time + schema.after_event_tolerance
    kept = [r for r in ordered if r.time <= limit]
    dropped = len(ordered) - len(kept)
    if dropped:
        logger.warning(f"Subject {subject_id}: truncated {dropped} measurement(s) after observed time {observed_time:.4f}")
    return kept, dropped


def _subject_problems(subject_id: str, sex: int, baseline: Dict[str, int], event: EventRecord,
                      records: List[LongitudinalRecord], min_measurements: int) -> List[Tuple[str, str]]:
    problems = []
    if len(records) < min_measurements:
        problems.append(("min_measurements", f"{len(records)} measurement(s), need {min_measurements}"))
    if sex not in (0, 1):
        problems.append(("binary_covariate", f"sex={sex}"))
    for name, value in baseline.items():
        if value not in (0, 1):
            problems.append(("binary_covariate", f"{name}={value}"))
    if event.event not in (0, 1):
        problems.append(("event_indicator", f"event={event.event}"))
    if not math.isfinite(event.observed_time):
        problems.append(("observed_time_finite", f"event_time={event.observed_time}"))
    if not 0 <= event.entry_time <= event.observed_time:
        problems.append(("entry_before_observed", f"entry_time={event.entry_time} > event_time={event.observed_time}"
                         if event.entry_time > event.observed_time else f"entry_time={event.entry_time} < 0"))
    for record in records:
        if record.time < 0:
            problems.append(("time_nonnegative", f"time={record.time}"))
        if not math.isfinite(record.value):
            problems.append(("value_finite", f"value={record.value} at time={record.time}"))
    return problems


def load_cohort(longitudinal_path: str, survival_path: str,
                schema_config: Optional[SchemaConfig] = None) -> Cohort:
    """Load, link and validate the longitudinal and survival CSV files."""
    schema = schema_config or SchemaConfig()
    long_path, surv_path = Path(longitudinal_path), Path(survival_path)
    long_cols = _column_map(LONGITUDINAL_COLUMNS, schema.longitudinal_columns)
    surv_cols = _column_map(SURVIVAL_COLUMNS, schema.survival_columns)

    long_frame = _read_table(long_path, long_cols, "longitudinal")
    surv_frame = _read_table(surv_path, surv_cols, "survival")
    has_flags = IMPUTED_FLAG_COLUMN in long_frame.columns

    parser = _RowParser(long_path, schema)
    records_by_subject: Dict[str, List[LongitudinalRecord]] = OrderedDict()
    for offset, row in enumerate(long_frame.to_dict("records")):
        line = offset + 2
        sid = parser.text(row[long_cols["subject_id"]], line, "subject_id")
        record = LongitudinalRecord(
            subject_id=sid,
            time=parser.time(row[long_cols["time"]], line, "time"),
            value=parser.real(row[long_cols["log_creatinine"]], line, "log_creatinine"),
            bmiz=parser.real(row[long_cols["bmiz"]], line, "bmiz", optional=True),
            bmiz_imputed=has_flags and row[IMPUTED_FLAG_COLUMN].strip() in ("1", "True", "true"),
        )
        records_by_subject.setdefault(sid, []).append(record)

    parser = _RowParser(surv_path, schema)
    survival_rows = OrderedDict()
    for offset, row in enumerate(surv_frame.to_dict("records")):
        line = offset + 2
        sid = parser.text(row[surv_cols["subject_id"]], line, "subject_id")
        if sid in survival_rows:
            raise CohortParseError(f"duplicate subject_id '{sid}'", path=str(surv_path), line=line)
        survival_rows[sid] = dict(
            entry_time=parser.time(row[surv_cols["entry_time"]], line, "entry_time"),
            event_time=parser.time(row[surv_cols["event_time"]], line, "event_time"),
            event=parser.integer(row[surv_cols["event"]], line, "event"),
            sex=parser.integer(row[surv_cols["sex"]], line, "sex"),
            age_entry=parser.real(row[surv_cols["age_entry"]], line, "age_entry"),
            baseline={name: parser.integer(row[surv_cols[name]], line, name) for name in SURVIVAL_COVARIATES},
        )

    only_long = sorted(set(records_by_subject) - set(survival_rows))
    only_surv = sorted(set(survival_rows) - set(records_by_subject))
    if only_long or only_surv:
        raise CohortLinkageError(
            f"unlinked subjects: {len(only_long)} only in {long_path.name} {only_long[:5]}, "
            f"{len(only_surv)} only in {surv_path.name} {only_surv[:5]}")

    staged = []
    excluded: List[Dict[str, str]] = []
    truncated = 0
    for sid, info in survival_rows.items():
        event = EventRecord(sid, info["entry_time"], info["event_time"], info["event"])
        records, dropped = _order_records(sid, records_by_subject[sid], event.observed_time, schema)
        truncated += dropped
        problems = _subject_problems(sid, info["sex"], info["baseline"], event, records, schema.min_measurements)
        if problems:
            reason = "; ".join(f"{name}: {detail}" for name, detail in problems)
            logger.warning(f"Excluding subject {sid}: {reason}")
            excluded.append({"subject_id": sid, "reason": reason})
            continue
        staged.append((sid, info, event, records))

    if not staged:
        raise CohortDataError("no subject passed validation")
    if len(staged) == 1:
        # sample sd is undefined for one subject; centre on its age with unit scale
        age_mean, age_sd = staged[0][1]["age_entry"], 1.0
        sage = np.zeros(1)
        logger.warning(f"Only subject {staged[0][0]} passed validation; age standardization uses sd = 1")
    else:
        sage, age_mean, age_sd = standardize(info["age_entry"] for _, info, _, _ in staged)

    subjects = tuple(
        Subject(
            subject_id=sid,
            sex=info["sex"],
            age_entry=info["age_entry"],
            sage=float(z),
            baseline=dict(info["baseline"]),
            records=tuple(records),
            event=event,
        )
        for (sid, info, event, records), z in zip(staged, sage)
    )
    provenance = {
        "longitudinal_path": str(long_path),
        "survival_path": str(surv_path),
        "longitudinal_rows": int(len(long_frame)),
        "survival_rows": int(len(surv_frame)),
        "excluded": excluded,
        "truncated_records": truncated,
    }
    cohort = Cohort(subjects, age_mean, age_sd, provenance, schema.after_event_tolerance)
    logger.info(f"Loaded cohort: {len(cohort)} subjects, {cohort.n_records} records "
                f"({len(excluded)} excluded, {truncated} truncated)")
    return cohort


def validate_cohort(cohort: Cohort, min_measurements: int = 2) -> ValidationReport:
    """Report every invariant violation in a cohort; never raises."""
    report = ValidationReport()
    duplicates = [sid for sid, n in Counter(cohort.subject_ids).items() if n > 1]
    for sid in duplicates:
        report.add(sid, "unique_subject_id", f"subject_id {sid} appears more than once")
    if not (cohort.age_sd > 0):
        report.add(None, "standardization_sd", f"age sd = {cohort.age_sd}")

    for subject in cohort:
        sid = subject.subject_id
        for name, detail in _subject_problems(sid, subject.sex, subject.baseline, subject.event,
                                              list(subject.records), min_measurements):
            report.add(sid, name, f"subject {sid}: {detail}")
        times = subject.times
        if times.size > 1 and np.any(np.diff(times) <= 0):
            report.add(sid, "times_increasing", f"subject {sid}: measurement times not strictly increasing")
        if times.size and times.max() > subject.event.observed_time + cohort.after_event_tolerance:
            report.add(sid, "measurement_after_follow_up",
                       f"subject {sid}: measurement at {times.max():.6g} after observed time {subject.event.observed_time:.6g}")
        if any(r.subject_id != sid for r in subject.records) or subject.event.subject_id != sid:
            report.add(sid, "record_linkage", f"subject {sid}: record carries a different subject_id")
    if report.violations:
        logger.warning(f"Cohort validation found {len(report.violations)} violation(s): {report.counts}")
    return report


def write_cohort(cohort: Cohort, longitudinal_path: str, survival_path: str):
    """Write the cohort back to the two CSV schemas (numeric times)."""
    long_rows = []
    for subject in cohort:
        for r in subject.records:
            long_rows.append({
                "subject_id": r.subject_id,
                "time": repr(r.time),
                "log_creatinine": repr(r.value),
                "bmiz": "" if r.bmiz is None else repr(r.bmiz),
                IMPUTED_FLAG_COLUMN: int(r.bmiz_imputed),
            })
    surv_rows = []
    for subject in cohort:
        row = {
            "subject_id": subject.subject_id,
            "entry_time": repr(subject.event.entry_time),
            "event_time": repr(subject.event.observed_time),
            "event": subject.event.event,
            "sex": subject.sex,
            "age_entry": repr(subject.age_entry),
        }
        row.update({name: subject.baseline[name] for name in SURVIVAL_COVARIATES})
        surv_rows.append(row)
    for path in (longitudinal_path, survival_path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(long_rows, columns=list(LONGITUDINAL_COLUMNS) + [IMPUTED_FLAG_COLUMN]).to_csv(longitudinal_path, index=False)
    pd.DataFrame(surv_rows, columns=list(SURVIVAL_COLUMNS)).to_csv(survival_path, index=False)
    logger.info(f"Wrote cohort ({len(cohort)} subjects) to {longitudinal_path}, {survival_path}")


def subset_cohort(cohort: Cohort, subject_ids: Iterable[str]) -> Cohort:
    """Sub-cohort keeping the parent's age standardization."""
    wanted = list(subject_ids)
    subjects = tuple(cohort.by_id(sid) for sid in wanted)
    provenance = dict(cohort.provenance, parent_subjects=len(cohort))
    return Cohort(subjects, cohort.age_mean, cohort.age_sd, provenance, cohort.after_event_tolerance)


def replace_subjects(cohort: Cohort, subjects: Sequence[Subject]) -> Cohort:
    return Cohort(tuple(subjects), cohort.age_mean, cohort.age_sd, dict(cohort.provenance),
                  cohort.after_event_tolerance)


def describe_cohort(cohort: Cohort) -> pd.DataFrame:
    """Baseline characteristics table: counts and percentages per covariate level."""
    n = len(cohort)
    rows = []
    female = sum(s.sex for s in cohort)
    rows.append(("Sex", "Male", n - female))
    rows.append(("Sex", "Female", female))
    for name in SURVIVAL_COVARIATES:
        yes = sum(s.baseline[name] for s in cohort)
        rows.append((name, "Yes", yes))
        rows.append((name, "No", n - yes))
    events = int(cohort.event_flags.sum())
    rows.append(("Event", "Yes", events))
    rows.append(("Event", "No", n - events))
    table = pd.DataFrame(rows, columns=["variable", "category", "count"])
    table["percent"] = 100.0 * table["count"] / n
    ages = np.array([s.age_entry for s in cohort])
    logger.info(f"Cohort summary: n={n}, records={cohort.n_records}, age mean={ages.mean():.2f} "
                f"sd={ages.std(ddof=1):.2f}, events={events} ({100.0 * events / n:.1f}%)")
    return table
