"""Exception types shared across the package."""


class CmdError(Exception):
    """Base class for every error raised by cmdskel."""


class DimensionError(CmdError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(CmdError, ValueError):
    """A scalar parameter (temperature, count, ...) is out of range."""


class InputError(CmdError, ValueError):
    """Input values are invalid, e.g. non-finite."""


class NumericDomainError(CmdError, ValueError):
    """A value falls outside the domain of a function (log of zero, ...)."""


class DegenerateInputError(CmdError, ValueError):
    """Input is too small or too degenerate for the operation."""


class SchemaError(CmdError, ValueError):
    """Data does not conform to the expected layout."""


class ParseError(CmdError, ValueError):
    """A file could not be parsed.

    ``line`` is the 1-based line number when known.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UsageError(CmdError, RuntimeError):
    """An API was called in a state where it cannot run."""
