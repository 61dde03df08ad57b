"""Exception types shared across the package.

Validation problems derive from ``ValueError`` and map to CLI exit code 1;
file problems derive from ``OSError`` and map to exit code 2.
"""


class VolwindowError(Exception):
    """Base class for every error raised deliberately by volwindow."""


class ValidationError(VolwindowError, ValueError):
    """Bad argument, bad config, or a violated data invariant."""


class ShapeError(ValidationError):
    pass


class GeometryError(ValidationError):
    pass


class FormatError(ValidationError):
    """A file parsed but uses a layout or datatype we do not support."""


class DimensionalityError(FormatError):
    pass


class NumericError(ValidationError):
    pass


class ContractError(ValidationError):
    """A pluggable component (e.g. a patch predictor) broke its contract."""


class NiftiIOError(VolwindowError, OSError):
    """Truncated or unreadable NIfTI payload."""
