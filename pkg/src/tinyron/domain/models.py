from dataclasses import dataclass
from typing import Self

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator


class Box(BaseModel):
    """Axis-aligned rectangle in image pixels, stored as center and size."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    cx: float
    cy: float
    w: float = Field(gt=0.0)
    h: float = Field(gt=0.0)

    @classmethod
    def from_corners(cls, left: float, top: float, right: float, bottom: float) -> Self:
        """Build a Box from its (l, t, r, b) corner view."""
        return cls(
            cx=(left + right) / 2.0,
            cy=(top + bottom) / 2.0,
            w=right - left,
            h=bottom - top,
        )

    @property
    def left(self) -> float:
        """Left edge."""
        return self.cx - self.w / 2.0

    @property
    def top(self) -> float:
        """Top edge."""
        return self.cy - self.h / 2.0

    @property
    def right(self) -> float:
        """Right edge."""
        return self.cx + self.w / 2.0

    @property
    def bottom(self) -> float:
        """Bottom edge."""
        return self.cy + self.h / 2.0

    @property
    def area(self) -> float:
        """Width times height."""
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        """Return (l, t, r, b)."""
        return (self.left, self.top, self.right, self.bottom)

    def clip(self, width: float, height: float) -> Self | None:
        """Clip to [0, width] x [0, height]; None when nothing is left."""
        left = min(max(self.left, 0.0), width)
        top = min(max(self.top, 0.0), height)
        right = min(max(self.right, 0.0), width)
        bottom = min(max(self.bottom, 0.0), height)
        if right <= left or bottom <= top:
            return None
        return self.from_corners(left, top, right, bottom)


class GroundTruth(BaseModel):
    """One annotated object: class id in [1..K], its box and the VOC difficult flag."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    class_id: int = Field(ge=1)
    box: Box
    difficult: bool = False


class Detection(BaseModel):
    """A scored, class-labelled box produced by inference."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    class_id: int = Field(ge=1)
    score: float = Field(ge=0.0, le=1.0)
    box: Box
    image_id: str = ""

    def to_record(self) -> dict[str, object]:
        """Return the JSON-lines record {image_id, class, score, box:[l,t,r,b]}."""
        return {
            "image_id": self.image_id,
            "class": self.class_id,
            "score": self.score,
            "box": list(self.box.corners()),
        }


class LossReport(BaseModel):
    """Raw multi-task loss components, their sample counts and the weighted total."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    obj_loss: float = Field(ge=0.0)
    loc_loss: float = Field(ge=0.0)
    cls_loss: float = Field(ge=0.0)
    obj_count: int = Field(ge=0)
    loc_count: int = Field(ge=0)
    cls_count: int = Field(ge=0)
    total: float = Field(ge=0.0)

    @staticmethod
    def _normalized(raw: float, count: int) -> float:
        return raw / count if count else 0.0

    @property
    def obj_normalized(self) -> float:
        """L_obj / N_obj, zero when the term was dropped."""
        return self._normalized(self.obj_loss, self.obj_count)

    @property
    def loc_normalized(self) -> float:
        """L_loc / N_loc, zero when the term was dropped."""
        return self._normalized(self.loc_loss, self.loc_count)

    @property
    def cls_normalized(self) -> float:
        """L_cls|obj / N_cls|obj, zero when the term was dropped."""
        return self._normalized(self.cls_loss, self.cls_count)


class PRCurve(BaseModel):
    """Precision/recall points of one class, in descending-score order, and its AP."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    recall: list[float] = Field(default_factory=list)
    precision: list[float] = Field(default_factory=list)
    ap: float = Field(ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_lengths(self) -> Self:
        if len(self.recall) != len(self.precision):
            msg = "recall and precision must have the same length"
            raise ValueError(msg)
        return self


class Annotation(BaseModel):
    """Objects of one image, in 0-based half-open pixel coordinates."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    image_id: str
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    objects: list[GroundTruth] = Field(default_factory=list)


@dataclass(frozen=True, slots=True)
class Sample:
    """An image (3, S, S) with values in [0, 1] and its annotation."""

    image: NDArray[np.float64]
    annotation: Annotation

    @property
    def image_id(self) -> str:
        """Identifier shared by the image and annotation files."""
        return self.annotation.image_id


class ManifestEntry(BaseModel):
    """Relative paths of one dataset item."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    image_id: str
    image: str
    annotation: str


class DatasetManifest(BaseModel):
    """Class list and items of a dataset directory."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    classes: list[str] = Field(min_length=1)
    entries: list[ManifestEntry] = Field(default_factory=list)


class Proposal(BaseModel):
    """A class-agnostic box ranked by objectness."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    score: float = Field(ge=0.0, le=1.0)
    box: Box
