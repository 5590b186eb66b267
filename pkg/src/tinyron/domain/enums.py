from enum import IntEnum, StrEnum


class Precision(StrEnum):
    """Floating point mode of a tensor."""

    STANDARD = "float32"
    VERIFICATION = "float64"


class ShapeKind(StrEnum):
    """Object classes drawn by the synthetic shapes generator."""

    CIRCLE = "circle"
    SQUARE = "square"
    TRIANGLE = "triangle"


class AnchorLabel(IntEnum):
    """Non-positive labels of an anchor; positives store their gt index (>= 0)."""

    NEGATIVE = -1
    IGNORE = -2


class AugmentOption(StrEnum):
    """The three ways a training image may be presented."""

    ORIGINAL = "original"
    FLIP = "flip"
    CROP = "crop"
