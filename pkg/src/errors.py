"""
Exception hierarchy for the GMENet pipeline.
"""
from typing import Optional


class GMENetError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(GMENetError, ValueError):
    """Array dimensions do not match what an operation expects."""


class ConfigError(GMENetError, ValueError):
    """Invalid configuration value, class count or checkpoint."""


class DatasetFormatError(GMENetError, ValueError):
    """Malformed dataset file. Carries the 1-based line number when known."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class ProtocolViolation(GMENetError):
    """A split/training rule was broken (test leakage, incomplete test record)."""


class GradientCheckError(GMENetError):
    """Finite-difference check could not be evaluated."""


class EmptyInputError(GMENetError, ValueError):
    """An operation received no samples."""
