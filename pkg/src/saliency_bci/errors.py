"""Exception hierarchy.

``DataError`` subclasses map to CLI exit code 2, ``NumericalError``
subclasses to exit code 3.
"""


class SaliencyBciError(Exception):
    """Base class for every error raised by this package."""


class DataError(SaliencyBciError):
    """Invalid input data, configuration or file content."""


class NumericalError(SaliencyBciError):
    """A computation diverged or hit a degenerate case."""


class MissingFile(DataError, FileNotFoundError):
    pass


class MalformedRow(DataError):
    pass


class NonFiniteSample(DataError):
    pass


class InconsistentChannelCount(DataError):
    pass


class EmptySet(DataError):
    pass


class DuplicateId(DataError):
    pass


class TrialIoError(DataError):
    pass


class InvalidSpec(DataError):
    pass


class InvalidBand(DataError):
    pass


class RateMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class NotRowStochastic(DataError):
    pass


class IndivisibleLength(DataError):
    pass


class LengthMismatch(DataError):
    pass


class NoTrialsForLabel(DataError):
    pass


class GridInvalid(DataError):
    pass


class InconsistentPair(DataError):
    pass


class ModelFormatError(DataError):
    pass


class UnstableDesign(NumericalError):
    pass


class NonFiniteActivation(NumericalError):
    pass


class SingularComposite(NumericalError):
    pass


class DegenerateFit(NumericalError):
    pass


class ZeroVariance(NumericalError):
    pass
