from typing import ClassVar


class TinyRonError(Exception):
    """Base class for all tinyron errors."""

    exit_code: ClassVar[int] = 1


class ConfigurationError(TinyRonError):
    """Raised when a model, training or run configuration is invalid."""

    exit_code: ClassVar[int] = 3


class UnsupportedConfigurationError(ConfigurationError):
    """Raised when an operation is asked for a configuration it does not implement."""


class DimensionError(TinyRonError):
    """Raised when tensor shapes do not fit an operation."""

    exit_code: ClassVar[int] = 4


class NumericError(TinyRonError):
    """Raised when a forward or backward pass produces NaN or Inf."""

    exit_code: ClassVar[int] = 5


class InputError(TinyRonError):
    """Raised for invalid boxes, annotations or other user-supplied data."""

    exit_code: ClassVar[int] = 6


class FormatError(InputError):
    """Raised when a PPM image, VOC annotation or weight file cannot be parsed."""


class StorageError(TinyRonError):
    """Raised when reading or writing persisted datasets or checkpoints fails."""

    exit_code: ClassVar[int] = 7
