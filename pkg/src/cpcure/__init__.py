"""Joint cure-mixture / random change-point model for tumor-burden
trajectories and progression times, fitted by Monte Carlo EM."""

__version__ = "0.1.0"

from .data import DAYS_PER_YEAR, GroupLabel, ModelParameters, StudyDataset, SubjectData, ingest_dataset
from .exceptions import (
    BootstrapError,
    ConfigError,
    CpcureError,
    DegeneracyError,
    DomainError,
    FactorizationError,
    LinkageError,
    ParseError,
    SamplingError,
    ValidationError,
)
from .mcem import FitConfig, FitResult, fit
from .inference import average_treatment_effect, bootstrap, marginal_trajectory, trajectory_ci
from .simulation import SimConfig, generate_dataset, run_benchmark

__all__ = [
    "DAYS_PER_YEAR", "GroupLabel", "ModelParameters", "StudyDataset", "SubjectData", "ingest_dataset",
    "BootstrapError", "ConfigError", "CpcureError", "DegeneracyError", "DomainError", "FactorizationError",
    "LinkageError", "ParseError", "SamplingError", "ValidationError",
    "FitConfig", "FitResult", "fit",
    "average_treatment_effect", "bootstrap", "marginal_trajectory", "trajectory_ci",
    "SimConfig", "generate_dataset", "run_benchmark",
]
