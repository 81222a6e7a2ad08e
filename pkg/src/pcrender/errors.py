"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ValidationError -> 2, FormatError and
subclasses -> 3, NumericsError -> 4.
"""


class PcrenderError(Exception):
    """Base class for all package errors."""


class ShapeError(PcrenderError, ValueError):
    """Tensor or image dimensions do not satisfy an operation's contract."""


class UsageError(PcrenderError, ValueError):
    """An API was called in a way its contract forbids."""


class ValidationError(PcrenderError, ValueError):
    """User-supplied configuration or arguments are invalid."""


class FormatError(PcrenderError, ValueError):
    """An external file does not conform to its declared format."""


class PlyParseError(FormatError):
    """Malformed PLY header or payload; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(FormatError):
    """A JSON document is missing a required key."""

    def __init__(self, key, message=None):
        self.key = key
        super().__init__(message or f"missing required key {key!r}")


class UnsupportedFormatError(FormatError):
    """The file is recognized but uses an unsupported variant."""


class NumericsError(PcrenderError, ArithmeticError):
    """A non-finite value appeared where the pipeline requires finite ones."""
