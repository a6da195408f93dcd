import os
import json
from datetime import date
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

# Load environment variables from .env file
from dotenv import load_dotenv
load_dotenv()

from errors import ConfigError
from model_spec import ModelSpec, preset


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    return int(value) if value not in (None, "") else default


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SchemaConfig(StrictModel):
    """Column-name overrides and ingestion tolerances for the cohort CSV files."""
    longitudinal_columns: Dict[str, str] = {}
    survival_columns: Dict[str, str] = {}
    bmi_columns: Dict[str, str] = {}
    study_origin: Optional[date] = None  # when set, time columns hold ISO dates
    after_event_tolerance: float = 1e-6  # years
    duplicate_time_offset: float = 1e-9  # years
    min_measurements: int = 2
    days_per_year: float = 365.25


class BmiLmmConfig(StrictModel):
    drop_constant_covariates: bool = False
    max_iter: int = 500


class SplineConfig(StrictModel):
    degree: int = 3
    n_interior_knots: int = 9
    penalty_order: int = 2
    quadrature_refine: int = 1  # equal sub-splits of every quadrature segment


class PriorSpec(StrictModel):
    """Prior stack of the joint model."""
    beta_sd: float = 10.0
    omega_sd: float = 10.0
    alpha_sd: float = 10.0
    sigma2_shape: float = 0.01
    sigma2_rate: float = 0.01
    D_df: Optional[float] = None  # None -> dim(D) + 1
    D_scale: Optional[List[List[float]]] = None  # None -> identity
    tau_shape: float = 1.0
    tau_rate: float = 0.005
    gamma_sd: float = 10.0  # ridge keeping the random-walk prior proper

    @model_validator(mode="after")
    def _check_positive(self):
        for name in ("beta_sd", "omega_sd", "alpha_sd", "gamma_sd", "sigma2_shape", "sigma2_rate", "tau_shape", "tau_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.D_df is not None and self.D_df <= 1:
            raise ValueError("D_df must exceed dim(D) - 1 = 1")
        return self


class McmcConfig(StrictModel):
    n_chains: int = 4
    n_iterations: int = 90000
    burn_in_fraction: float = 0.5
    thin: int = 10
    seed: int = Field(default_factory=lambda: _env_int("JOINTRISK_SEED", 20190401))
    adaptation_window: int = 100
    use_likelihood: bool = True
    target_accept_block: float = 0.234
    target_accept_scalar: float = 0.44
    rhat_threshold: float = 1.05
    threads: int = Field(default_factory=lambda: _env_int("JOINTRISK_THREADS", 1))
    progress_every: int = 1000
    d_update: Literal["gibbs", "mh"] = "gibbs"  # "mh": random walk on the log-diagonal Cholesky factor

    @model_validator(mode="after")
    def _check(self):
        if self.n_iterations < 2:
            raise ValueError("n_iterations must be >= 2")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ValueError("burn_in_fraction must be in [0, 1)")
        if self.thin < 1 or self.n_chains < 1:
            raise ValueError("thin and n_chains must be >= 1")
        return self

    @property
    def n_burn_in(self) -> int:
        return int(self.n_iterations * self.burn_in_fraction)


class PredictionConfig(StrictModel):
    n_mh_steps: int = 20  # per-draw random-effect sampler iterations
    max_draws: Optional[int] = None  # None -> every retained draw
    credible_level: float = 0.95


class EvaluationConfig(StrictModel):
    landmarks: List[float] = [0.5, 2.0]
    horizons: List[float] = [1.0, 2.0, 3.0]
    folds: int = 4
    pointwise: str = "conditional"
    n_marginal_samples: int = 200

    @field_validator("pointwise")
    @classmethod
    def _check_pointwise(cls, value):
        if value not in ("conditional", "marginal"):
            raise ValueError("pointwise must be 'conditional' or 'marginal'")
        return value


class SimulationConfig(StrictModel):
    n_subjects: int = 514
    study_horizon: float = 6.75  # years, 1 Apr 2019 to 31 Dec 2025
    entry_window: float = 0.5  # years; staggered entry after the study origin
    mean_visits: float = 17.0
    bmiz_missing_rate: float = 0.3
    target_event_fraction: Optional[float] = 0.11
    association: Tuple[str, ...] = ("area",)


class RunConfig(StrictModel):
    """Resolved settings of one CLI run."""
    output_dir: str = "runs/latest"
    longitudinal_path: Optional[str] = None
    survival_path: Optional[str] = None
    bmi_path: Optional[str] = None
    lms_reference_path: Optional[str] = None
    fit_dir: Optional[str] = None
    fit_dirs: List[str] = []
    model: Union[str, ModelSpec] = "M5"
    subjects: List[str] = []
    landmarks: List[float] = [1.0]
    horizon: float = 1.0
    dt_grid: List[float] = []
    write_per_draw: bool = False
    seed: int = Field(default_factory=lambda: _env_int("JOINTRISK_SEED", 20190401))
    threads: int = Field(default_factory=lambda: _env_int("JOINTRISK_THREADS", 1))
    fail_on_nonconvergence: bool = False
    schema_: SchemaConfig = Field(default_factory=SchemaConfig, alias="schema")
    bmi_lmm: BmiLmmConfig = Field(default_factory=BmiLmmConfig)
    spline: SplineConfig = Field(default_factory=SplineConfig)
    prior: PriorSpec = Field(default_factory=PriorSpec)
    mcmc: McmcConfig = Field(default_factory=McmcConfig)
    prediction: PredictionConfig = Field(default_factory=PredictionConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    def model_spec(self) -> ModelSpec:
        if isinstance(self.model, ModelSpec):
            return self.model
        return preset(self.model)


class AppConfig(BaseModel):
    log_level: str = Field(default_factory=lambda: os.getenv("JOINTRISK_LOG_LEVEL", "INFO"))
    threads: int = Field(default_factory=lambda: _env_int("JOINTRISK_THREADS", 1))
    seed: int = Field(default_factory=lambda: _env_int("JOINTRISK_SEED", 20190401))
    run_slow_tests: bool = Field(default_factory=lambda: os.getenv("JOINTRISK_RUN_SLOW_TESTS", "0") == "1")
    schema_: SchemaConfig = Field(default_factory=SchemaConfig, alias="schema")
    spline: SplineConfig = SplineConfig()
    prior: PriorSpec = PriorSpec()
    mcmc: McmcConfig = Field(default_factory=McmcConfig)
    prediction: PredictionConfig = PredictionConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    simulation: SimulationConfig = SimulationConfig()

    model_config = ConfigDict(populate_by_name=True)


def _parse_override_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Apply `dotted.key=value` overrides to a nested config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override '{item}' is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Override key '{key}' descends into a non-mapping value")
            node = child
        node[parts[-1]] = _parse_override_value(raw.strip())
    return data


def _describe_validation_error(exc: ValidationError) -> str:
    messages = []
    for err in exc.errors():
        location = ".".join(str(p) for p in err.get("loc", ()))
        if err.get("type") == "extra_forbidden":
            messages.append(f"unknown config key '{location}'")
        else:
            messages.append(f"{location}: {err.get('msg')}")
    return "; ".join(messages)


def load_run_config(path: Optional[str] = None, overrides: Optional[List[str]] = None,
                    **explicit: Any) -> RunConfig:
    """Read a JSON run config, apply overrides and validate it."""
    data: Dict[str, Any] = {}
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            data = json.loads(config_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must contain a JSON object")
    apply_overrides(data, overrides or [])
    for key, value in explicit.items():
        if value is not None:
            data[key] = value
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_describe_validation_error(e)) from e


# Global config instance
config = AppConfig()
