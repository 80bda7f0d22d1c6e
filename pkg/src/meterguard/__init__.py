"""Adversarial perturbations for smart-meter signals against disaggregation models."""

from meterguard.errors import (
    AlignmentError,
    ConfigError,
    DataError,
    DegenerateInputError,
    DivergenceError,
    EmptyInputError,
    MeterGuardError,
    NumericError,
    ParseError,
    ShapeError,
    SizeLimitError,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "ConfigError",
    "DataError",
    "DegenerateInputError",
    "DivergenceError",
    "EmptyInputError",
    "MeterGuardError",
    "NumericError",
    "ParseError",
    "ShapeError",
    "SizeLimitError",
]
