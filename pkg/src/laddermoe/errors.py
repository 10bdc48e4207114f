"""Exception types shared across the package."""


class LadderMoeError(Exception):
    """Base class for all package errors."""


class DimensionError(LadderMoeError):
    """Tensor or array shapes are incompatible with the requested operation."""


class ParameterError(LadderMoeError):
    """An argument value is outside its documented range."""


class DataError(LadderMoeError):
    """A dataset is empty, inconsistent, or too small for the requested split."""


class LayoutError(LadderMoeError):
    """Requested page layout cannot fit the characters."""


class ThresholdError(LadderMoeError):
    """No valid-width boxes available to estimate the column threshold."""


class FormatError(LadderMoeError):
    """A serialized file is corrupt, truncated, or of an unsupported version."""


class NumericError(LadderMoeError):
    """A computation produced non-finite values."""


class InternalError(LadderMoeError):
    """An invariant the library maintains internally was violated."""
