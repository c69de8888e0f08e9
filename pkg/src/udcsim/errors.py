"""Exception types raised across the package."""


class UdcError(Exception):
    """Base class for all package errors."""


class DimensionError(UdcError, ValueError):
    pass


class ConfigError(UdcError, ValueError):
    pass


class FormatError(UdcError, ValueError):
    """Raised when a file decodes but is not an 8/16-bit RGB raster."""


class StateError(UdcError, RuntimeError):
    pass


class IntegrityError(UdcError):
    """A manifest entry does not match the files on disk."""


class TrainingAborted(UdcError, RuntimeError):
    """A training run hit a non-finite loss; parameters were left untouched."""

    def __init__(self, message, step=None, losses=None):
        super().__init__(message)
        self.step = step
        self.losses = dict(losses or {})
