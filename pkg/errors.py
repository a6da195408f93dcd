"""
Exception hierarchy for the joint-model risk engine.
Each error carries the process exit code the CLI maps it to.
"""

from typing import Optional


class JointRiskError(Exception):
    """Base class for all engine errors."""
    exit_code = 1


class ConfigError(JointRiskError, ValueError):
    """Invalid or unknown configuration."""
    exit_code = 2


class CohortDataError(JointRiskError, ValueError):
    """Input data does not satisfy the cohort schema or invariants."""
    exit_code = 3


class CohortParseError(CohortDataError):
    """Malformed input row."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ": "
        super().__init__(f"{location}{message}")


class CohortLinkageError(CohortDataError):
    """Subject present in one input file but not the other."""


class ModelFitError(JointRiskError, ValueError):
    """A model term cannot be identified from the data."""
    exit_code = 3

    def __init__(self, message: str, term: Optional[str] = None):
        self.term = term
        super().__init__(message)


class NumericalError(JointRiskError, ArithmeticError):
    """Non-finite or otherwise unusable numerical result."""
    exit_code = 4

    def __init__(self, message: str, location: Optional[float] = None):
        self.location = location
        if location is not None:
            message = f"{message} (at t={location:.6g})"
        super().__init__(message)


class RangeError(NumericalError, ValueError):
    """Argument outside the supported domain (spline support, LMS grid)."""


class InitializationError(NumericalError):
    """Posterior is not finite at the initial values."""


class ConvergenceError(JointRiskError):
    """Chains failed the configured convergence thresholds."""
    exit_code = 5


class PredictionError(JointRiskError, ValueError):
    """A prediction request violates its preconditions."""
    exit_code = 3


class UndefinedMetricError(JointRiskError, ArithmeticError):
    """A metric has no defined value on the given data (no pairs, empty risk set)."""
    exit_code = 4
