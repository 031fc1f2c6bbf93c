"""Tune MPC lateral-planner weights against recorded driving demonstrations."""

from demotune.errors import (
    DemoTuneError,
    GradientEvaluationError,
    InvalidConfigError,
    InvalidInputError,
    NumericalFailure,
    OutOfRangeError,
    ParseError,
)

__version__ = "0.1.0"

__all__ = [
    "DemoTuneError",
    "GradientEvaluationError",
    "InvalidConfigError",
    "InvalidInputError",
    "NumericalFailure",
    "OutOfRangeError",
    "ParseError",
    "__version__",
]
