# File: src/fedpower/errors.py
"""
Exception hierarchy.

Every error raised on purpose by the package derives from FedPowerError and
from the closest builtin, so callers may catch either.
"""

from __future__ import annotations

__all__ = [
    "FedPowerError",
    "ShapeError",
    "DimensionError",
    "NumericError",
    "StateError",
    "ConfigError",
    "UnsupportedPolicyError",
    "DomainError",
    "DegenerateChannelError",
    "DegenerateGraphError",
    "DataError",
    "FormatError",
    "ConsistencyError",
    "LengthError",
    "LabelError",
    "DivergenceError",
]


class FedPowerError(Exception):
    """Base class for all fedpower errors."""


class ShapeError(FedPowerError, ValueError):
    """Operand shapes are incompatible."""


class DimensionError(ShapeError):
    """A fixed-size model was given an input of the wrong size."""


class NumericError(FedPowerError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class StateError(FedPowerError, RuntimeError):
    """An operation was invoked in the wrong order."""


class ConfigError(FedPowerError, ValueError):
    """Invalid configuration value or missing configured artifact."""


class UnsupportedPolicyError(ConfigError):
    """The requested policy kind cannot be used for this experiment."""


class DomainError(FedPowerError, ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class DegenerateChannelError(FedPowerError, ValueError):
    """A channel vector is identically zero."""


class DegenerateGraphError(FedPowerError, ValueError):
    """A CSI graph has a node with non-positive degree."""


class DataError(FedPowerError, ValueError):
    """Dataset content is unusable."""


class FormatError(DataError):
    """A file does not follow its declared binary format."""


class ConsistencyError(DataError):
    """Two related files disagree with each other."""


class LengthError(DataError):
    """A payload is shorter than its header announces."""


class LabelError(FedPowerError, IndexError):
    """A class label lies outside [0, C)."""


class DivergenceError(FedPowerError, RuntimeError):
    """Training diverged according to the configured validation rule."""
