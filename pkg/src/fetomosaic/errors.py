"""Exception types raised across the package."""


class MosaicError(Exception):
    """Base class for all package errors."""


class SingularTransform(MosaicError):
    pass


class EmptyImage(MosaicError):
    pass


class FormatError(MosaicError):
    pass


class NormalizationError(MosaicError):
    pass


class DimensionMismatch(MosaicError):
    pass


class DegenerateSample(MosaicError):
    pass


class InsufficientMatches(MosaicError):
    pass


class NoConsensus(MosaicError):
    pass


class EmptyLayout(MosaicError):
    pass


class EmptyInput(MosaicError):
    pass


class CanvasMismatch(MosaicError):
    pass


class NoOverlap(MosaicError):
    pass


class MissingGroundTruth(MosaicError):
    pass


class PathExitsTexture(MosaicError):
    pass


class IndexOutOfRange(MosaicError):
    pass


class ConfigError(MosaicError):
    pass
