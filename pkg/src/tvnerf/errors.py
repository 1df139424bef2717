"""Exception types shared across the package."""


class TvNerfError(Exception):
    """Base class for all package errors."""


class ConfigError(TvNerfError, ValueError):
    pass


class StateError(TvNerfError, RuntimeError):
    pass


class DomainError(TvNerfError, ValueError):
    pass


class ShapeError(TvNerfError, ValueError):
    pass


class FormatError(TvNerfError, ValueError):
    """Malformed on-disk file (bad magic, truncated payload, ...)."""


class NumericError(TvNerfError, FloatingPointError):
    """A non-finite value appeared.

    ``where`` identifies the offending tape node, head or sample when known.
    """

    def __init__(self, message, where=None):
        super().__init__(message if where is None else f"{message} [{where}]")
        self.where = where


class DivergenceError(TvNerfError, RuntimeError):
    def __init__(self, message, last_finite_step, checkpoint=None):
        super().__init__(message)
        self.last_finite_step = last_finite_step
        self.checkpoint = checkpoint
