"""Exception hierarchy shared by every stage of the pipeline."""


class RedDotError(Exception):
    """Base class for all package errors."""


class FormatError(RedDotError):
    """A file does not follow the expected binary or text layout."""


class DataError(RedDotError):
    """Inputs are well-formed but semantically invalid (NaN, dangling ids, ...)."""


class ConfigError(RedDotError):
    """Invalid configuration or hyperparameter."""


class ShapeError(RedDotError):
    """Array shapes do not agree."""


class StateError(RedDotError):
    """An operation was called in a state that does not support it."""


class IoError(RedDotError, OSError):
    """A path could not be read or written."""


class NumericalError(RedDotError):
    """A non-finite value appeared during computation."""
