"""
CavityLab Exceptions

Error hierarchy shared by the volume codec, the losses, the phantom
generator, the metrics battery and the experiment driver.
"""


class CavityLabError(Exception):
    """Base exception for all cavitylab errors."""

    pass


class VolumeFormatError(CavityLabError, ValueError):
    """Raised when a VOL1 file cannot be decoded."""

    pass


class BadMagicError(VolumeFormatError):
    """Raised when a file does not start with the VOL1 magic bytes."""

    pass


class TruncatedPayloadError(VolumeFormatError):
    """Raised when the header or payload is shorter than the header announces."""

    pass


class UnsupportedDTypeError(VolumeFormatError):
    """Raised when the header dtype code is outside {0, 1}."""

    pass


class NonFiniteValueError(VolumeFormatError):
    """Raised when a scalar field contains NaN or infinity."""

    pass


class MaskValueError(VolumeFormatError):
    """Raised when a mask payload holds bytes other than 0 and 1."""

    pass


class DimensionMismatchError(CavityLabError, ValueError):
    """Raised when two fields that must share dims do not."""

    pass


class NormalizationError(CavityLabError, ValueError):
    """Raised when a field expected in [0, 1] falls outside it."""

    pass


class PhantomGenerationError(CavityLabError, RuntimeError):
    """Raised when the cavity random walk cannot stay inside the bone block."""

    pass


class MetricUndefinedError(CavityLabError, ValueError):
    """Raised when a metric has no defined value for its inputs."""

    pass


class WilcoxonUndefinedError(MetricUndefinedError):
    """Raised when every paired difference is zero."""

    pass


class UnknownLossError(CavityLabError, ValueError):
    """Raised when a loss name is not one of the supported kinds."""

    pass


class ConfigError(CavityLabError, ValueError):
    """Raised when an experiment config is malformed; message names the key path."""

    pass
