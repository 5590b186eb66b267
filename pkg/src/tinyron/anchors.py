"""Default boxes on the four detection scales and the box <-> offset transforms."""

import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from tinyron.domain.errors import InputError
from tinyron.domain.models import Box
from tinyron.settings import (
    ASPECT_RATIOS,
    SCALE_STRIDES,
    ModelConfig,
    require_divisible,
)
from tinyron.tensor import Sites

logger = logging.getLogger(__name__)

type Boxes = NDArray[np.float64]

# Bounds t_w, t_h before exp so a decoded box stays within ~55x its anchor.
EXP_CLAMP = 4.0


def to_corners(boxes: ArrayLike) -> Boxes:
    """(cx, cy, w, h) rows -> (l, t, r, b) rows."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = b[:, 2:] / 2.0
    return np.concatenate([b[:, :2] - half, b[:, :2] + half], axis=1)


def to_centers(boxes: ArrayLike) -> Boxes:
    """(l, t, r, b) rows -> (cx, cy, w, h) rows."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.concatenate([(b[:, :2] + b[:, 2:]) / 2.0, b[:, 2:] - b[:, :2]], axis=1)


def box_sizes(scale_ordinal: int, s_min: float) -> tuple[float, float]:
    """The two box scales {(2k-1)s_min, 2k s_min} of detection scale k in 1..4."""
    return ((2 * scale_ordinal - 1) * s_min, 2 * scale_ordinal * s_min)


@dataclass(frozen=True, slots=True)
class AnchorSet:
    """Flat, immutable list of default boxes over all enabled scales.

    Anchors are ordered by scale (layer 4 first), then row, column and box index,
    matching the channel-to-anchor flattening of the network heads.
    """

    image_size: int
    layers: tuple[int, ...]
    boxes: Boxes
    layer: NDArray[np.intp]
    grid_y: NDArray[np.intp]
    grid_x: NDArray[np.intp]
    box_index: NDArray[np.intp]
    starts: dict[int, int]
    extents: dict[int, int]
    sizes: dict[int, tuple[float, float]]
    per_location: int

    def __len__(self) -> int:
        """Total number of anchors."""
        return int(self.boxes.shape[0])

    @property
    def corners(self) -> Boxes:
        """(l, t, r, b) view of every anchor."""
        return to_corners(self.boxes)

    def flat_index(self, layer: int, y: int, x: int, a: int) -> int:
        """Position of anchor (scale, row, column, box index) in the flat list."""
        extent = self.extents[layer]
        return self.starts[layer] + (y * extent + x) * self.per_location + a

    def sites(
        self,
        anchor_ids: NDArray[np.intp],
        batch_ids: NDArray[np.intp],
    ) -> list[tuple[int, NDArray[np.intp], Sites]]:
        """Split flat anchor ids into per-scale head locations.

        Returns (layer, positions into anchor_ids, Sites) for every scale that
        has at least one of the anchors.
        """
        groups: list[tuple[int, NDArray[np.intp], Sites]] = []
        layers = self.layer[anchor_ids]
        for layer in self.layers:
            positions = np.flatnonzero(layers == layer)
            if positions.size == 0:
                continue
            ids = anchor_ids[positions]
            sites = Sites(
                batch=batch_ids[positions],
                box=self.box_index[ids],
                y=self.grid_y[ids],
                x=self.grid_x[ids],
            )
            groups.append((layer, positions, sites))
        return groups


def generate(config: ModelConfig, size: int | None = None) -> AnchorSet:
    """Default boxes for an input of `size` pixels (config.input_size by default).

    Centers sit at ((x + 0.5) stride, (y + 0.5) stride); for scale s and ratio r
    the box is w = s sqrt(r), h = s / sqrt(r). Boxes are not clipped.
    """
    size = require_divisible(config.input_size if size is None else size)
    s_min = config.min_scale(size)
    per_location = config.anchors_per_location

    boxes: list[Boxes] = []
    layer_ids: list[NDArray[np.intp]] = []
    ys: list[NDArray[np.intp]] = []
    xs: list[NDArray[np.intp]] = []
    box_ids: list[NDArray[np.intp]] = []
    starts: dict[int, int] = {}
    extents: dict[int, int] = {}
    sizes: dict[int, tuple[float, float]] = {}
    start = 0
    for layer in config.detection_scales:
        stride = SCALE_STRIDES[layer]
        extent = size // stride
        scales = box_sizes(layer - 3, s_min)
        shapes = np.array(
            [
                (s * math.sqrt(r), s / math.sqrt(r))
                for s in scales
                for r in ASPECT_RATIOS
            ],
        )
        grid_y, grid_x, box_id = np.meshgrid(
            np.arange(extent),
            np.arange(extent),
            np.arange(per_location),
            indexing="ij",
        )
        grid_y, grid_x, box_id = grid_y.ravel(), grid_x.ravel(), box_id.ravel()
        centers = np.stack([(grid_x + 0.5) * stride, (grid_y + 0.5) * stride], axis=1)
        boxes.append(np.concatenate([centers, shapes[box_id]], axis=1))
        layer_ids.append(np.full(grid_y.shape, layer, dtype=np.intp))
        ys.append(grid_y)
        xs.append(grid_x)
        box_ids.append(box_id)
        starts[layer] = start
        extents[layer] = extent
        sizes[layer] = scales
        start += grid_y.size

    anchors = AnchorSet(
        image_size=size,
        layers=tuple(config.detection_scales),
        boxes=np.concatenate(boxes).astype(np.float64),
        layer=np.concatenate(layer_ids),
        grid_y=np.concatenate(ys).astype(np.intp),
        grid_x=np.concatenate(xs).astype(np.intp),
        box_index=np.concatenate(box_ids).astype(np.intp),
        starts=starts,
        extents=extents,
        sizes=sizes,
        per_location=per_location,
    )
    logger.debug("Generated %d anchors for %dpx input", len(anchors), size)
    return anchors


def encode_boxes(gt: ArrayLike, anchors: ArrayLike) -> Boxes:
    """Regression targets t* for (cx, cy, w, h) rows of gt against anchors."""
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    if (g[:, 2:] <= 0).any() or (a[:, 2:] <= 0).any():
        msg = "encode needs strictly positive box extents"
        raise InputError(msg)
    return np.stack(
        [
            (g[:, 0] - a[:, 0]) / a[:, 2],
            (g[:, 1] - a[:, 1]) / a[:, 3],
            np.log(g[:, 2] / a[:, 2]),
            np.log(g[:, 3] / a[:, 3]),
        ],
        axis=1,
    )


def decode_boxes(
    anchors: ArrayLike,
    offsets: ArrayLike,
    *,
    clip_to: float | None = None,
) -> Boxes:
    """Apply offsets t to anchors; returns (cx, cy, w, h) rows.

    t_w and t_h are clamped to [-4, 4] before exp. With clip_to, boxes are
    clipped to [0, clip_to] on both axes (degenerate results keep zero extent).
    """
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    scale = np.exp(np.clip(t[:, 2:], -EXP_CLAMP, EXP_CLAMP))
    decoded = np.concatenate([a[:, :2] + t[:, :2] * a[:, 2:], a[:, 2:] * scale], axis=1)
    if clip_to is None:
        return decoded
    return to_centers(np.clip(to_corners(decoded), 0.0, clip_to))


def encode(gt: Box, anchor: Box) -> NDArray[np.float64]:
    """t* = ((cx_g - cx_a)/w_a, (cy_g - cy_a)/h_a, ln(w_g/w_a), ln(h_g/h_a))."""
    row = encode_boxes(
        [gt.cx, gt.cy, gt.w, gt.h],
        [anchor.cx, anchor.cy, anchor.w, anchor.h],
    )
    return row[0]


def decode(anchor: Box, offsets: ArrayLike, *, clip_to: float | None = None) -> Box:
    """Inverse of encode, with the exp clamp and optional clipping to the image."""
    t = np.asarray(offsets, dtype=np.float64)
    if not np.isfinite(t).all():
        msg = f"decode needs finite offsets, got {t}"
        raise InputError(msg)
    cx, cy, w, h = decode_boxes(
        [anchor.cx, anchor.cy, anchor.w, anchor.h],
        t,
        clip_to=clip_to,
    )[0]
    if w <= 0 or h <= 0:
        msg = f"decoded box lies outside the {clip_to}px image"
        raise InputError(msg)
    return Box(cx=float(cx), cy=float(cy), w=float(w), h=float(h))
