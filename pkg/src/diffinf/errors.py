"""Exception types shared across the package."""


class DiffinfError(Exception):
    """Base class for all package errors."""


class ConfigError(DiffinfError):
    """Invalid parameter or configuration value."""


class DimensionError(DiffinfError):
    """Vector/array shape does not match the expected contract."""


class InputError(DiffinfError):
    """Out-of-range timestep, label, or malformed runtime input."""


class FormatError(DiffinfError):
    """On-disk data violates its documented byte layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IncompatibleCacheError(DiffinfError):
    """Query or model does not match the cache manifest."""


class NumericError(DiffinfError):
    """Non-finite values or numerical divergence."""
