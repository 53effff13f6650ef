"""Parametric lens-distortion synthesis and TPS-based rectification."""

__version__ = "0.1.0"

from rectiwarp.errors import (
    DegenerateError,
    InvalidArgumentError,
    NoConvergenceError,
    RectiwarpError,
)
