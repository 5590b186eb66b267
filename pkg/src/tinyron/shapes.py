"""Synthetic shapes: circles, squares and triangles on a gray background."""

import logging
import math
from collections.abc import Sequence

import numpy as np
from numpy.typing import NDArray

from tinyron.assigner import iou_matrix
from tinyron.domain.enums import ShapeKind
from tinyron.domain.errors import InputError
from tinyron.domain.models import Annotation, Box, GroundTruth, Sample

logger = logging.getLogger(__name__)

BACKGROUND = 128
MIN_CONTRAST = 64
MIN_SIZE = 8
MAX_SIZE_FRACTION = 0.8
MAX_OBJECTS = 4
MAX_OVERLAP = 0.3
PLACEMENT_TRIES = 20


def _fill_mask(kind: ShapeKind, size: int) -> NDArray[np.bool_]:
    """Pixels of a size x size patch covered by the shape (sampled at pixel centers)."""
    centers = np.arange(size) + 0.5
    ys, xs = np.meshgrid(centers, centers, indexing="ij")
    half = size / 2.0
    if kind is ShapeKind.SQUARE:
        return np.ones((size, size), dtype=bool)
    if kind is ShapeKind.CIRCLE:
        inside: NDArray[np.bool_] = (xs - half) ** 2 + (ys - half) ** 2 <= half**2
        return inside
    # apex at the top center, base along the bottom edge
    triangle: NDArray[np.bool_] = np.abs(xs - half) <= (ys + 0.5) / 2.0
    return triangle


def _color(rng: np.random.Generator) -> NDArray[np.int64]:
    while True:
        color = rng.integers(0, 256, size=3)
        if np.abs(color - BACKGROUND).max() >= MIN_CONTRAST:
            return color


def _draw_sizes(
    rng: np.random.Generator,
    count: int,
    size_range: tuple[int, int],
) -> list[int]:
    """Log-uniform object sizes, largest first."""
    low, high = size_range
    sizes = np.exp(rng.uniform(math.log(low), math.log(high), size=count))
    return sorted((int(round(s)) for s in sizes), reverse=True)


def _place(
    rng: np.random.Generator,
    size: int,
    image_size: int,
    placed: list[tuple[float, float, float, float]],
) -> tuple[int, int] | None:
    for _ in range(PLACEMENT_TRIES):
        left = int(rng.integers(0, image_size - size + 1))
        top = int(rng.integers(0, image_size - size + 1))
        corners = (left, top, left + size, top + size)
        if not placed or iou_matrix([corners], placed).max() < MAX_OVERLAP:
            return left, top
    return None


def render(
    rng: np.random.Generator,
    image_id: str,
    classes: Sequence[ShapeKind],
    size_range: tuple[int, int],
    image_size: int,
) -> Sample:
    """Draw one image with 1..4 shapes; annotations are the exact shape extents."""
    canvas = np.full((3, image_size, image_size), BACKGROUND, dtype=np.uint8)
    count = int(rng.integers(1, MAX_OBJECTS + 1))
    placed: list[tuple[float, float, float, float]] = []
    objects: list[GroundTruth] = []
    for size in _draw_sizes(rng, count, size_range):
        class_index = int(rng.integers(len(classes)))
        color = _color(rng)
        position = _place(rng, size, image_size, placed)
        if position is None:
            continue
        left, top = position
        mask = _fill_mask(classes[class_index], size)
        patch = canvas[:, top : top + size, left : left + size]
        patch[:, mask] = color[:, None].astype(np.uint8)
        placed.append((left, top, left + size, top + size))
        objects.append(
            GroundTruth(
                class_id=class_index + 1,
                box=Box.from_corners(left, top, left + size, top + size),
            ),
        )
    annotation = Annotation(
        image_id=image_id,
        width=image_size,
        height=image_size,
        objects=objects,
    )
    return Sample(image=canvas / 255.0, annotation=annotation)


def gen_shapes(
    n: int,
    classes: Sequence[ShapeKind] = tuple(ShapeKind),
    size_range: tuple[int, int] | None = None,
    seed: int = 0,
    *,
    image_size: int = 128,
) -> list[Sample]:
    """Generate n images deterministically from seed.

    Object sizes default to [8, 0.8 * image_size] pixels so every detection
    scale sees positives. Class ids follow the order of `classes`, from 1.
    """
    if n < 1:
        msg = f"gen_shapes needs n >= 1, got {n}"
        raise InputError(msg)
    if not classes:
        msg = "gen_shapes needs at least one shape class"
        raise InputError(msg)
    low, high = size_range or (MIN_SIZE, int(MAX_SIZE_FRACTION * image_size))
    if not MIN_SIZE // 2 <= low <= high <= image_size:
        msg = f"size range ({low}, {high}) does not fit a {image_size}px image"
        raise InputError(msg)
    rng = np.random.default_rng(seed)
    samples = [
        render(rng, f"{index:05d}", classes, (low, high), image_size)
        for index in range(n)
    ]
    logger.info(
        "Generated %d images with %d objects (seed %d)",
        n,
        sum(len(s.annotation.objects) for s in samples),
        seed,
    )
    return samples
