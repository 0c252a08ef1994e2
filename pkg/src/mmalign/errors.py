"""Exception hierarchy shared across the package."""


class MMAlignError(Exception):
    """Base class for all package errors."""


class ZeroNormError(MMAlignError, ValueError):
    pass


class DimMismatchError(MMAlignError, ValueError):
    pass


class BatchMismatchError(MMAlignError, ValueError):
    pass


class BatchTooSmallError(MMAlignError, ValueError):
    pass


class UnknownParameterError(MMAlignError, KeyError):
    pass


class TooFewModalitiesError(MMAlignError, ValueError):
    pass


class NoOtherModalitiesError(MMAlignError, ValueError):
    pass


class DegenerateColumnError(MMAlignError, ValueError):
    pass


class ShapeMismatchError(MMAlignError, ValueError):
    pass


class EmptyCurveError(MMAlignError, ValueError):
    pass


class GridSizeMismatchError(MMAlignError, ValueError):
    pass


class BadSpecError(MMAlignError, ValueError):
    pass


class EmptyDatasetError(MMAlignError, ValueError):
    pass


class StepOutOfRangeError(MMAlignError, ValueError):
    pass


class ModalityMissingError(MMAlignError, ValueError):
    pass


class NonFiniteLossError(MMAlignError, FloatingPointError):
    pass


class PropertyMissingError(MMAlignError, KeyError):
    pass


class BadKError(MMAlignError, ValueError):
    pass


class WindowNotCoveredError(MMAlignError, ValueError):
    pass


class BadNError(MMAlignError, ValueError):
    pass


class DuplicateIdError(MMAlignError, ValueError):
    pass


class LookupMissingError(MMAlignError, KeyError):
    pass


class SampleTooLargeError(MMAlignError, ValueError):
    pass


class TooFewRowsError(MMAlignError, ValueError):
    pass


class FormatError(MMAlignError, ValueError):
    """A binary or text file does not match its declared layout."""
