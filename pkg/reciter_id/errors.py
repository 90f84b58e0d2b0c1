"""Exception hierarchy shared by every module."""


class ReciterIdError(Exception):
    """Base class for all errors raised by reciter_id."""


class UsageError(ReciterIdError):
    """Bad command line usage."""


# Data errors: malformed or inconsistent inputs

class DataError(ReciterIdError, ValueError):
    """Input data is malformed or inconsistent."""


class NotWav(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class Truncated(DataError):
    pass


class ParseError(DataError):
    """A manifest or config line could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f'line {line}: {message}'
        super().__init__(message)


class ConfigError(ParseError):
    pass


class DuplicatePath(DataError):
    pass


class ClassTooSmall(DataError):
    pass


class EmptySplit(DataError):
    pass


class MissingClass(DataError):
    pass


class IndexOutOfRange(DataError):
    pass


class ClipTooShort(DataError):
    pass


class InputTooShort(DataError):
    pass


class EmptyLabels(DataError):
    pass


class LengthMismatch(DataError):
    pass


class BadId(DataError):
    pass


class EmptyMatrix(DataError):
    pass


class TooFewPoints(DataError):
    pass


class CorruptCheckpoint(DataError):
    pass


class VersionMismatch(DataError):
    pass


# Numeric errors: operator contracts

class NumericError(ReciterIdError):
    """An operator was called outside its contract."""


class ShapeMismatch(NumericError, ValueError):
    pass


class BadTarget(NumericError, ValueError):
    pass


class NonPositiveWeight(NumericError, ValueError):
    pass


class NotScalar(NumericError, ValueError):
    pass


class GraphCycle(NumericError):
    pass


class NonFiniteValue(NumericError, FloatingPointError):
    pass


class AllFramesInvalid(NumericError, ValueError):
    pass


# Training errors

class TrainingError(ReciterIdError):
    """Training could not proceed."""


class DivergedLoss(TrainingError):
    def __init__(self, message, step=None, checkpoint_path=None):
        self.step = step
        self.checkpoint_path = checkpoint_path
        super().__init__(message)


class TooFewMasked(TrainingError, ValueError):
    pass


class EmptyMask(TrainingError, ValueError):
    pass


class BadLabel(TrainingError, ValueError):
    pass
