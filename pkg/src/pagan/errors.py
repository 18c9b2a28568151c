"""Exception types shared across the package."""

from pagan.tensor import DomainError, NoGradientError


class NumericError(FloatingPointError):
    """A value that must be finite was not; ``where`` names the culprit."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class FormatError(ValueError):
    """A file on disk does not match the expected binary layout; ``field`` names the part."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ConfigError(ValueError):
    """A configuration key or value is invalid."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


__all__ = ["ConfigError", "DomainError", "FormatError", "NoGradientError", "NumericError"]
