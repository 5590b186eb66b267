from tinyron.domain import (
    Annotation,
    Box,
    Detection,
    GroundTruth,
    Sample,
    TinyRonError,
)
from tinyron.network import TinyRON, build
from tinyron.settings import ModelConfig, TrainConfig

__all__ = [
    "Annotation",
    "Box",
    "Detection",
    "GroundTruth",
    "ModelConfig",
    "Sample",
    "TinyRON",
    "TinyRonError",
    "TrainConfig",
    "build",
]
