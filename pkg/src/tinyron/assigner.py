import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from tinyron.anchors import AnchorSet, encode_boxes
from tinyron.domain.enums import AnchorLabel
from tinyron.domain.models import Box, GroundTruth

logger = logging.getLogger(__name__)

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.3
DEFAULT_O_P = 0.03

type Indices = NDArray[np.intp]


def iou(a: Box, b: Box) -> float:
    """Jaccard overlap of two boxes; 0 when they are disjoint."""
    return float(iou_matrix([a.corners()], [b.corners()])[0, 0])


def iou_matrix(a: ArrayLike, b: ArrayLike) -> NDArray[np.float64]:
    """Pairwise IoU of (l, t, r, b) rows: result[i, j] = IoU(a[i], b[j])."""
    first = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    second = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(first[:, None, :2], second[None, :, :2])
    rb = np.minimum(first[:, None, 2:], second[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (first[:, 2] - first[:, 0]) * (first[:, 3] - first[:, 1])
    area_b = (second[:, 2] - second[:, 0]) * (second[:, 3] - second[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


@dataclass(frozen=True, slots=True)
class Assignment:
    """Per-anchor supervision: matched gt index or an AnchorLabel, class and t*."""

    matched: Indices
    classes: Indices
    targets: NDArray[np.float64]
    max_iou: NDArray[np.float64]

    @property
    def positives(self) -> Indices:
        """Anchors matched to a ground truth, ascending."""
        return np.flatnonzero(self.matched >= 0)

    @property
    def negatives(self) -> Indices:
        """Background anchors, ascending."""
        return np.flatnonzero(self.matched == AnchorLabel.NEGATIVE)

    @property
    def ignored(self) -> Indices:
        """Anchors in the IoU band that receive no supervision."""
        return np.flatnonzero(self.matched == AnchorLabel.IGNORE)


def _forced_matches(ious: NDArray[np.float64]) -> dict[int, int]:
    """Give every gt its best anchor; a contested anchor goes to the higher IoU.

    Gts are served in order of (best IoU descending, gt index ascending). Each
    takes its highest-IoU anchor not already taken, the lowest anchor index on
    ties, so a gt that loses a contested anchor falls back to its next best.
    """
    best = ious.max(axis=0)
    order = sorted(range(ious.shape[1]), key=lambda g: (-best[g], g))
    taken = np.zeros(ious.shape[0], dtype=bool)
    forced: dict[int, int] = {}
    for g in order:
        column = np.where(taken, -1.0, ious[:, g])
        anchor = int(column.argmax())
        taken[anchor] = True
        forced[g] = anchor
    return forced


def match(
    anchors: AnchorSet,
    gts: Sequence[GroundTruth],
    *,
    positive_iou: float = POSITIVE_IOU,
    negative_iou: float = NEGATIVE_IOU,
) -> Assignment:
    """Two-step matching.

    (ii) anchors whose best IoU exceeds positive_iou become positive for their
    best gt (lowest gt index on ties); (i) then every gt forces its best anchor
    positive. Anchors with best IoU below negative_iou are negative and the
    rest are ignored. With no gts every anchor is negative.
    """
    count = len(anchors)
    if not gts:
        return Assignment(
            matched=np.full(count, AnchorLabel.NEGATIVE, dtype=np.intp),
            classes=np.zeros(count, dtype=np.intp),
            targets=np.zeros((count, 4)),
            max_iou=np.zeros(count),
        )

    gt_boxes = np.array([(g.box.cx, g.box.cy, g.box.w, g.box.h) for g in gts])
    gt_classes = np.array([g.class_id for g in gts], dtype=np.intp)
    ious = iou_matrix(anchors.corners, [g.box.corners() for g in gts])
    best_gt = ious.argmax(axis=1)
    max_iou = ious.max(axis=1)

    matched = np.where(
        max_iou < negative_iou,
        AnchorLabel.NEGATIVE,
        AnchorLabel.IGNORE,
    ).astype(np.intp)
    above = max_iou > positive_iou
    matched[above] = best_gt[above]
    for g, anchor in _forced_matches(ious).items():
        matched[anchor] = g

    positives = np.flatnonzero(matched >= 0)
    classes = np.zeros(count, dtype=np.intp)
    classes[positives] = gt_classes[matched[positives]]
    targets = np.zeros((count, 4))
    targets[positives] = encode_boxes(
        gt_boxes[matched[positives]],
        anchors.boxes[positives],
    )
    return Assignment(matched=matched, classes=classes, targets=targets, max_iou=max_iou)


def gate(obj_probs: ArrayLike, o_p: float = DEFAULT_O_P) -> NDArray[np.bool_]:
    """Binarize objectness p1 at o_p (p1 >= o_p passes)."""
    return np.asarray(obj_probs) >= o_p


def pass_fraction(obj_probs: ArrayLike, o_p: float = DEFAULT_O_P) -> float:
    """Share of anchors the gate lets through."""
    mask = gate(obj_probs, o_p)
    return float(mask.mean()) if mask.size else 0.0


@dataclass(frozen=True, slots=True)
class SampleSelection:
    """Anchors that feed each branch's loss for one image."""

    obj_positive: Indices
    obj_negative: Indices
    det_positive: Indices
    det_negative: Indices

    @property
    def is_empty(self) -> bool:
        """True when neither branch selected anything."""
        return not (
            self.obj_positive.size
            or self.obj_negative.size
            or self.det_positive.size
            or self.det_negative.size
        )


def _draw(pool: Indices, quota: int, rng: np.random.Generator) -> Indices:
    if pool.size <= quota:
        return pool
    return np.sort(rng.choice(pool, size=quota, replace=False))


def sample(
    assignment: Assignment,
    gate_mask: NDArray[np.bool_],
    rng: np.random.Generator,
    *,
    neg_pos_ratio: int = 3,
    use_objectness: bool = True,
) -> SampleSelection:
    """Select all positives plus uniform negatives at up to neg_pos_ratio per positive.

    The objectness branch draws from every negative; the detection branch only
    from negatives that pass the gate. Positives always reach both branches.
    """
    positives = assignment.positives
    negatives = assignment.negatives
    quota = neg_pos_ratio * positives.size
    none = np.zeros(0, dtype=np.intp)

    obj_negative = _draw(negatives, quota, rng) if use_objectness else none
    det_negative = _draw(negatives[gate_mask[negatives]], quota, rng)
    selection = SampleSelection(
        obj_positive=positives if use_objectness else none,
        obj_negative=obj_negative,
        det_positive=positives,
        det_negative=det_negative,
    )
    if selection.is_empty:
        logger.warning("Empty sample selection (no positives or negatives)")
    return selection
