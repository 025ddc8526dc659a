"""Exception hierarchy shared by every mitoforge module."""


class MitoforgeError(Exception):
    """Base class for all package errors."""


class ConfigError(MitoforgeError, ValueError):
    """Invalid configuration values."""


class ContractError(MitoforgeError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(MitoforgeError, ValueError):
    """Incompatible tensor or image extents."""


class ShapeError(DimensionError):
    """A stored tensor does not match the shape the model expects."""


class NumericError(MitoforgeError, ArithmeticError):
    """Non-finite values or a numerically singular problem."""


class FormatError(MitoforgeError, ValueError):
    """A file does not follow the expected binary or text layout."""


class ManifestError(FormatError):
    """A manifest row could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateInputError(MitoforgeError, ValueError):
    """The input carries too little signal for the requested estimate."""


class UndefinedMetricError(MitoforgeError, ValueError):
    """A metric is undefined for the given counts (e.g. an empty class)."""
