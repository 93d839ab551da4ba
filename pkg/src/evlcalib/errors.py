class CalibrationError(Exception):
    """Base class for every error raised by this package."""


class LengthMismatchError(CalibrationError, ValueError):
    pass


class EmptyInputError(CalibrationError, ValueError):
    pass


class UnsortedStreamError(CalibrationError, ValueError):
    pass


class OutOfBoundsError(CalibrationError, ValueError):
    pass


class NonFiniteParametersError(CalibrationError, FloatingPointError):
    pass


class NonFiniteGradientError(CalibrationError, FloatingPointError):
    pass


class DivergenceDetected(CalibrationError, FloatingPointError):
    pass


class NoLidarEdgesError(CalibrationError):
    pass


class DatasetNotFoundError(CalibrationError, FileNotFoundError):
    pass


class CheckpointNotFoundError(CalibrationError, FileNotFoundError):
    pass


class FormatError(CalibrationError, ValueError):
    """A file did not match its documented layout."""
