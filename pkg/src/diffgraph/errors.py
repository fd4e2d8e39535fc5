"""Exception hierarchy shared by every diffgraph module."""


class DiffGraphError(Exception):
    """Base class for all domain errors (CLI maps these to exit code 1)."""


class DimensionMismatchError(DiffGraphError):
    pass


class ShapeMismatchError(DimensionMismatchError):
    pass


class DuplicateIdError(DiffGraphError):
    pass


class UnknownIdError(DiffGraphError, KeyError):
    pass


class IncompleteCalibrationError(DiffGraphError):
    pass


class UncalibratedExpertError(DiffGraphError):
    pass


class NoCkptSelectedError(DiffGraphError):
    pass


class NoCkptExpertsError(DiffGraphError):
    pass


class FilterEmptiedCkptError(DiffGraphError):
    pass


class FilterProtocolError(DiffGraphError):
    """An LLM filter returned ids that were not among its candidates."""


class IoFailureError(DiffGraphError):
    pass


class FormatVersionMismatchError(DiffGraphError):
    pass


class ChecksumMismatchError(DiffGraphError):
    pass


class ZeroVectorError(DiffGraphError):
    pass


class InsufficientCandidatesError(DiffGraphError):
    pass


class PayloadMismatchError(DiffGraphError):
    pass


class LlmUnavailableError(DiffGraphError):
    pass


class NonFiniteOutputError(DiffGraphError):
    pass


class NonFiniteGradientError(DiffGraphError):
    pass


class EmptyInputError(DiffGraphError):
    pass


class SliceMismatchError(DiffGraphError):
    pass
