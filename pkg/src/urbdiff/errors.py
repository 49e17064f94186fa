"""Exception hierarchy shared by every urbdiff module."""


class UrbdiffError(Exception):
    """Base class for all errors raised by urbdiff."""


class ParseError(UrbdiffError):
    pass


class UnsupportedFormat(UrbdiffError):
    pass


class TruncatedFile(ParseError):
    pass


class AlignmentError(UrbdiffError):
    pass


class OutOfBounds(UrbdiffError):
    pass


class ConfigError(UrbdiffError):
    pass


class ShapeError(UrbdiffError):
    pass


class LabelError(UrbdiffError):
    pass


class NumericFault(UrbdiffError):
    """Raised when a NaN or Inf shows up in a forward value or gradient."""

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class IncompatibleCheckpoint(UrbdiffError):
    pass


class ManifestError(UrbdiffError):
    pass


class BalanceError(UrbdiffError):
    pass


class DegenerateSplit(UrbdiffError):
    pass


class SampleError(UrbdiffError):
    pass


class DegenerateBand(UserWarning):
    """Warning category: a constant band could not be z-scored and was left as is."""
