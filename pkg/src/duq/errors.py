"""Exception hierarchy shared across the package."""


class DuqError(Exception):
    """Base class for all package errors."""


class ConfigError(DuqError, ValueError):
    """Invalid architecture or run configuration (shape mismatch, bad hyperparameter)."""


class UsageError(DuqError, ValueError):
    """Caller violated an operation's preconditions."""


class FormatError(DuqError, ValueError):
    """Malformed on-disk artifact."""


class NumericError(DuqError, RuntimeError):
    """Non-finite value encountered during computation."""


class InferenceError(NumericError):
    """Non-finite output from a network at inference time."""
