"""Exception hierarchy shared across the package.

DataError covers malformed or inconsistent inputs (CLI exit code 2);
NumericalError covers failures arising during computation, such as NaNs
mid-forward or degenerate statistics (CLI exit code 3).  Format-level
errors carry a stable ``code`` string so callers can branch without
string-matching messages.
"""


class PolyfuseError(Exception):
    """Base class for all package errors."""


class DataError(PolyfuseError):
    """Invalid, malformed, or inconsistent input data."""

    code = "data"


class NumericalError(PolyfuseError):
    """Numerical failure during computation."""

    code = "numerical"


class FormatError(DataError):
    """Binary file format violation; subclasses carry distinct codes."""

    code = "format"


class BadMagicError(FormatError):
    code = "bad_magic"


class VersionMismatchError(FormatError):
    code = "version_mismatch"


class TruncatedError(FormatError):
    code = "truncated"


class NonFinitePayloadError(FormatError):
    code = "non_finite"


class DuplicateIdError(FormatError):
    code = "duplicate_id"


class ShapeMismatchError(FormatError):
    code = "shape_mismatch"
