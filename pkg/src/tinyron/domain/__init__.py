from tinyron.domain.enums import AnchorLabel, AugmentOption, Precision, ShapeKind
from tinyron.domain.errors import (
    ConfigurationError,
    DimensionError,
    FormatError,
    InputError,
    NumericError,
    StorageError,
    TinyRonError,
    UnsupportedConfigurationError,
)
from tinyron.domain.models import (
    Annotation,
    Box,
    DatasetManifest,
    Detection,
    GroundTruth,
    LossReport,
    ManifestEntry,
    PRCurve,
    Proposal,
    Sample,
)

__all__ = [
    "AnchorLabel",
    "Annotation",
    "AugmentOption",
    "Box",
    "ConfigurationError",
    "DatasetManifest",
    "Detection",
    "DimensionError",
    "FormatError",
    "GroundTruth",
    "InputError",
    "LossReport",
    "ManifestEntry",
    "NumericError",
    "PRCurve",
    "Precision",
    "Proposal",
    "Sample",
    "ShapeKind",
    "StorageError",
    "TinyRonError",
    "UnsupportedConfigurationError",
]
