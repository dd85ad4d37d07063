"""Exception types shared across the package."""


class IIFCNError(Exception):
    """Base class for all package errors."""


class ShapeError(IIFCNError, ValueError):
    """A tensor or raster has extents an operation cannot accept."""


class InvalidArgumentError(IIFCNError, ValueError):
    pass


class InvalidInputError(IIFCNError, ValueError):
    """Input data violates a domain constraint (e.g. a non-binary mask)."""


class ConfigError(IIFCNError, ValueError):
    pass


class CorruptCheckpointError(IIFCNError):
    pass


class TrainingDivergedError(IIFCNError, FloatingPointError):
    pass
