"""
Declarative joint-model specifications and the M1-M7 candidate grid.
"""

from typing import Dict, Tuple
from pydantic import BaseModel, ConfigDict, field_validator

from errors import ConfigError

LONGITUDINAL_TERMS: Tuple[str, ...] = ("intercept", "time", "sex", "sage", "bmiz")
SURVIVAL_COVARIATES: Tuple[str, ...] = (
    "comorb", "kidneyhist", "cortico", "immuno", "immmod", "bcell", "ccb", "acei",
)
ASSOCIATIONS: Tuple[str, ...] = ("value", "slope", "area")

# Display labels for summary tables
TERM_LABELS: Dict[str, str] = {
    "intercept": "Intercept",
    "time": "Time",
    "sex": "Sex",
    "sage": "Age at entry (SAge)",
    "bmiz": "BMI z-score (BMIZ)",
    "comorb": "Comorbidity (Comorb)",
    "kidneyhist": "Kidney condition (KidneyHist)",
    "cortico": "Corticosteroid (Cortico)",
    "immuno": "Immunosuppressant (Immuno)",
    "immmod": "Immune modulator (ImmMod)",
    "bcell": "B-cell therapy (BCell)",
    "ccb": "Calcium channel blocker (CCB)",
    "acei": "ACE inhibitor (ACEi)",
    "value": "Current value",
    "slope": "Slope",
    "area": "Cumulative exposure",
}


class ModelSpec(BaseModel):
    """One candidate joint model: sub-model terms and association structure."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "custom"
    longitudinal_terms: Tuple[str, ...] = LONGITUDINAL_TERMS
    survival_covariates: Tuple[str, ...] = SURVIVAL_COVARIATES
    association: Tuple[str, ...] = ("area",)

    @field_validator("longitudinal_terms")
    @classmethod
    def _check_terms(cls, terms):
        unknown = [t for t in terms if t not in LONGITUDINAL_TERMS]
        if unknown:
            raise ValueError(f"unknown longitudinal terms: {unknown}")
        if "intercept" not in terms:
            raise ValueError("longitudinal_terms must include 'intercept'")
        # canonical order keeps parameter names stable across runs
        return tuple(t for t in LONGITUDINAL_TERMS if t in terms)

    @field_validator("survival_covariates")
    @classmethod
    def _check_covariates(cls, covariates):
        unknown = [c for c in covariates if c not in SURVIVAL_COVARIATES]
        if unknown:
            raise ValueError(f"unknown survival covariates: {unknown}")
        return tuple(c for c in SURVIVAL_COVARIATES if c in covariates)

    @field_validator("association")
    @classmethod
    def _check_association(cls, association):
        unknown = [a for a in association if a not in ASSOCIATIONS]
        if unknown:
            raise ValueError(f"unknown association structures: {unknown}")
        return tuple(a for a in ASSOCIATIONS if a in association)

    @property
    def uses_bmiz(self) -> bool:
        return "bmiz" in self.longitudinal_terms

    def is_active(self, association: str) -> bool:
        return association in self.association


# Association masks of the candidate grid; covariates are shared by all presets.
PRESET_ASSOCIATIONS: Dict[str, Tuple[str, ...]] = {
    "M1": ("value", "slope", "area"),
    "M2": ("value", "slope"),
    "M3": ("value",),
    "M4": ("slope",),
    "M5": ("area",),
    "M6": ("value", "area"),
    "M7": ("slope", "area"),
}


def preset(name: str) -> ModelSpec:
    """Return the named candidate specification (M1-M7)."""
    key = name.upper()
    if key not in PRESET_ASSOCIATIONS:
        raise ConfigError(f"Unknown model preset '{name}'; choose one of {sorted(PRESET_ASSOCIATIONS)}")
    return ModelSpec(name=key, association=PRESET_ASSOCIATIONS[key])


def all_presets() -> Dict[str, ModelSpec]:
    return {name: preset(name) for name in PRESET_ASSOCIATIONS}
