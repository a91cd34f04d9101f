"""Exception types raised across the package."""


class GnasError(Exception):
    """Base class for all package errors."""


class DimensionError(GnasError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateBatchError(GnasError, ValueError):
    """A batch statistic is undefined (e.g. batch norm over one row)."""


class ValidationError(GnasError, ValueError):
    """Input data violates a structural precondition."""


class ConfigurationError(GnasError, ValueError):
    """Inconsistent configuration, e.g. a head that does not fit the task."""


class ParseError(GnasError, ValueError):
    """Malformed serialized input.

    ``line`` is the 1-based line number when the source is line oriented.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
