"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class BlocrError(Exception):
    """Base class for all package errors."""

    exit_code = 1
    kind = "error"


class ValidationError(BlocrError, ValueError):
    """Bad user input: shapes, sizes, indices, missing config keys."""

    exit_code = 2
    kind = "validation"


class FormatError(ValidationError):
    """A binary or text file does not follow its declared layout."""

    kind = "format"


class NumericalError(BlocrError, ArithmeticError):
    """Numerical corruption detected (non-PD matrix, non-finite posterior)."""

    exit_code = 3
    kind = "numerical"
