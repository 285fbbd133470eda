"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes are incompatible with the requested operation."""


class InvalidInputError(ValueError):
    """An input contains NaN or is otherwise outside the valid domain."""


class NumericalError(ArithmeticError):
    """A factorization or other numerical routine failed.

    Parameters
    ----------
    message : str
        Human readable description.
    minor : int, optional
        1-based order of the leading minor that is not positive definite,
        when the failure comes from a Cholesky factorization.
    """

    def __init__(self, message, minor=None):
        super().__init__(message)
        self.minor = minor


class ConfigError(ValueError):
    """A run configuration or data file is malformed."""


class UnsupportedOperationError(RuntimeError):
    """The operation is not defined for the given input."""


class ParseError(ConfigError):
    """A data file row could not be parsed.

    Parameters
    ----------
    message : str
    line : int, optional
        1-based line number of the offending row.
    """

    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class UnsupportedFormatError(ConfigError):
    """A data file is well formed but uses a layout that is not supported."""
