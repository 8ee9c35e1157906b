"""Exception types shared across the package.

``DataError`` subclasses describe bad inputs (files, rates, labels) and map to
CLI exit code 2; ``NumericError`` maps to exit code 3.
"""


class TitiError(Exception):
    """Base class for every error raised by this package."""


class DataError(TitiError, ValueError):
    pass


class NumericError(TitiError):
    pass


# audio_io
class NotWav(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class Truncated(DataError):
    pass


# features
class RateMismatch(DataError):
    pass


class TooShort(DataError):
    pass


class DegenerateFilter(DataError):
    pass


class DimMismatch(DataError):
    pass


class Empty(DataError):
    pass


class BadConfig(DataError):
    pass


# nnet
class ShapeMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class BadLabel(DataError):
    pass


# detector / call classifier
class EmptyDataset(DataError):
    pass


class NoPositives(DataError):
    pass


class SingleClass(DataError):
    pass


class OverlappingSegments(DataError):
    pass


# decoder / metrics
class BadBand(DataError):
    pass


class UnsortedInput(DataError):
    pass


class TooFew(DataError):
    pass


# persistence
class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class OverlapError(DataError):
    pass


class BadVersion(DataError):
    pass


class KindError(DataError):
    pass


class Corrupt(DataError):
    pass
