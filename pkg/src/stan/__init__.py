"""Spatial-temporal attention network for open-set fine-grained recognition."""

from .errors import ConfigError, DataError, IoError, NumericalError, ShapeError, StanError
from .tensor import GradTape, Tensor, backward, default_dtype, grad_check

__all__ = [
    "ConfigError",
    "DataError",
    "GradTape",
    "IoError",
    "NumericalError",
    "ShapeError",
    "StanError",
    "Tensor",
    "backward",
    "default_dtype",
    "grad_check",
]

__version__ = "0.1.0"
