"""Exception hierarchy shared across the package."""


class NeutrocapsError(Exception):
    """Base class for all package errors."""


class ShapeError(NeutrocapsError, ValueError):
    """Tensor or array dimensions do not fit the operation."""


class ParameterError(NeutrocapsError, ValueError):
    """A numeric parameter is outside its valid range."""


class ConfigError(NeutrocapsError, ValueError):
    """A configuration is malformed or internally inconsistent."""


class DataError(NeutrocapsError):
    """Input data is missing, empty or unusable."""


class FormatError(DataError):
    """A file on disk does not follow the expected binary or text format."""


class UsageError(NeutrocapsError, RuntimeError):
    """An API was called in a state where it cannot proceed."""
