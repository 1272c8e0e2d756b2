"""Counterfactual visual explanations of binary image classifiers."""

from counterfax.errors import (
    ConfigError,
    FormatError,
    NumericalError,
    SampleSizeError,
    ShapeError,
    UndefinedMetricError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FormatError",
    "NumericalError",
    "SampleSizeError",
    "ShapeError",
    "UndefinedMetricError",
    "__version__",
]
