"""Exception types shared across the package."""


class XtseError(Exception):
    """Base class for all package errors."""


class ConfigError(XtseError, ValueError):
    """Invalid or mismatched configuration (sample rates, geometry, modes)."""


class ShapeError(XtseError, ValueError):
    """Length or shape mismatch between signals/tensors."""


class DomainError(XtseError, ValueError):
    """Input outside the mathematical domain of an operation (e.g. zero reference)."""


class DataError(XtseError, ValueError):
    """Invalid corpus/pool contents or insufficient data."""


class TrainingFailure(XtseError, RuntimeError):
    """Unrecoverable training-loop failure (repeated non-finite losses, bad checkpoint dir)."""
