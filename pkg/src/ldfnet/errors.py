"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: UsageError and ConfigError are usage
problems (exit 1), DataError covers bad files or label values (exit 2),
and DivergenceError / NumericError are runtime failures (exit 3).
"""


class LdfnetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LdfnetError):
    """Tensor shapes are inconsistent for the requested operation."""


class ArgumentError(LdfnetError):
    """An argument value is invalid (nonpositive stride, bad rate, ...)."""


class ConfigError(LdfnetError):
    """A block, model, or run configuration is internally inconsistent."""


class DataError(LdfnetError):
    """Input data is unreadable, malformed, or out of range."""


class CheckpointError(DataError):
    """A checkpoint file is truncated, versioned wrong, or mismatched."""


class UsageError(LdfnetError):
    """The API or CLI was invoked incorrectly."""


class NumericError(LdfnetError):
    """A computation produced non-finite values."""


class DivergenceError(LdfnetError):
    """Training left the stable regime (exploding loss or NaN gradients)."""
