"""Exception types shared across the package."""


class DmemmError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(DmemmError):
    """Invalid configuration value, violated precondition, or missing artifact."""


class ShapeError(DmemmError):
    """Array dimensions do not match the declared contract."""


class StepRangeError(DmemmError):
    """Diffusion step index outside [1, K]."""


class NumericError(DmemmError):
    """Non-finite value encountered where a finite one is required."""


class UnsupportedVersionError(ConfigError):
    """Persisted artifact carries a format version this build does not understand."""


class BlobLengthError(DmemmError):
    """Binary blob size disagrees with the sizes declared in its manifest."""
