"""Exception hierarchy for the cpcure package."""

import numpy as np


class CpcureError(Exception):
    """Base class for all package errors."""


class ValidationError(CpcureError, ValueError):
    """Input data violate the data contract."""


class LinkageError(ValidationError):
    """Longitudinal and event tables do not refer to the same subjects."""


class ParseError(ValidationError):
    """A tabular source could not be parsed into numeric fields."""


class DomainError(CpcureError, ValueError):
    """An argument lies outside the domain of a function."""


class FactorizationError(CpcureError, np.linalg.LinAlgError):
    """A matrix that should be positive definite is not."""


class SamplingError(CpcureError, FloatingPointError):
    """A sampler cannot produce draws (degenerate or underflowing support)."""


class DegeneracyError(CpcureError, FloatingPointError):
    """Importance weights or evidences collapsed for a subject."""

    def __init__(self, message, subject_ids=()):
        super().__init__(message)
        self.subject_ids = tuple(subject_ids)


class BootstrapError(CpcureError, RuntimeError):
    """Every bootstrap replicate failed."""


class ConfigError(CpcureError, ValueError):
    """A configuration document is invalid; ``field`` names the offending path."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field
