"""Variational inference for ODE parameters via a state-space relaxation."""

from .dataio import ObservationSet, read_dataset, simulate_dataset, write_dataset
from .errors import ConfigError, DomainError, NumericFailure, SsvbError
from .models import resolve_model
from .odes import OdeSystemSpec, TransitionConfig, integrate, transition
from .optimizer import FitResult, fit
from .tuning import TuningResult, select_tuning
from .vb import FitConfig, PriorConfig

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DomainError", "FitConfig", "FitResult", "NumericFailure",
    "ObservationSet", "OdeSystemSpec", "PriorConfig", "SsvbError",
    "TransitionConfig", "TuningResult", "fit", "integrate", "read_dataset",
    "resolve_model", "select_tuning", "simulate_dataset", "transition",
    "write_dataset", "__version__",
]
