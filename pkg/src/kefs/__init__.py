"""Knowledge-enhanced feature synthesis for zero-shot food detection."""

from ._kernels import BACKEND
from .errors import (
    CheckpointError,
    ConfigError,
    InputDataError,
    KefsError,
    StorageError,
    TrainingDivergence,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CheckpointError",
    "ConfigError",
    "InputDataError",
    "KefsError",
    "StorageError",
    "TrainingDivergence",
    "__version__",
]
