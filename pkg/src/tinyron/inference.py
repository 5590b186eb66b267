"""Detections from head outputs: objectness-weighted scores, decoding and NMS.

Heads run densely; the objectness prior acts at test time only through the
score product p_obj * p_cls|obj.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from tinyron.anchors import AnchorSet, decode_boxes, generate, to_corners
from tinyron.assigner import iou_matrix
from tinyron.domain.errors import DimensionError
from tinyron.domain.models import Box, Detection, Proposal
from tinyron.formats import resize
from tinyron.network import TinyRON, flatten_maps, normalize_images

logger = logging.getLogger(__name__)

CONF_THRESH = 0.01
NMS_THRESH = 0.45
TOP_K = 200
PROPOSAL_NMS_THRESH = 0.7


def score(obj_probs: ArrayLike | None, cls_probs: ArrayLike) -> NDArray[np.float64]:
    """Per-anchor per-class p_cls = p_obj * p_cls|obj, background column dropped.

    obj_probs holds p1 per anchor (shape (...,)); cls_probs the K+1 class
    probabilities (shape (..., K+1)). Without an objectness prior the scores
    are the class-conditional probabilities themselves.
    """
    cls = np.asarray(cls_probs, dtype=np.float64)[..., 1:]
    if obj_probs is None:
        return cls
    return np.asarray(obj_probs, dtype=np.float64)[..., None] * cls


def nms(
    boxes: ArrayLike,
    scores: ArrayLike,
    iou_thresh: float = NMS_THRESH,
    *,
    limit: int | None = None,
) -> NDArray[np.intp]:
    """Greedy NMS over (l, t, r, b) boxes; returns kept indices in descending score.

    Score ties go to the lower index. A box is suppressed when its IoU with an
    already kept box exceeds iou_thresh. With limit, stops after that many keeps.
    """
    corners = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    values = np.asarray(scores, dtype=np.float64).reshape(-1)
    if corners.shape[0] != values.shape[0]:
        msg = f"nms: {corners.shape[0]} boxes but {values.shape[0]} scores"
        raise DimensionError(msg)
    order = np.argsort(-values, kind="stable")
    keep = []
    while order.size and (limit is None or len(keep) < limit):
        best = order[0]
        keep.append(best)
        overlaps = iou_matrix(corners[best], corners[order[1:]])[0]
        order = order[1:][overlaps <= iou_thresh]
    return np.asarray(keep, dtype=np.intp)


@dataclass(frozen=True, slots=True)
class Predictions:
    """Anchor-major head outputs for a batch at one input size."""

    anchors: AnchorSet
    obj: NDArray[np.float64] | None
    cls: NDArray[np.float64]
    loc: NDArray[np.float64]


def predict(model: TinyRON, images: Sequence[NDArray[np.floating]]) -> Predictions:
    """Forward (3, H, W) images in [0, 1], each resized to the model input size."""
    config = model.config
    size = config.input_size
    batch = np.stack([resize(image, size) for image in images])
    outputs = model.forward(normalize_images(batch, config.precision))
    obj_maps = outputs.obj_probs()
    obj = None if obj_maps is None else flatten_maps(obj_maps, 2)[..., 1]
    return Predictions(
        anchors=generate(config, size),
        obj=None if obj is None else obj.astype(np.float64),
        cls=flatten_maps(outputs.cls_probs(), config.num_classes + 1).astype(np.float64),
        loc=flatten_maps(outputs.loc_preds(), 4).astype(np.float64),
    )


def _decoded(anchors: AnchorSet, offsets: NDArray[np.float64]) -> NDArray[np.float64]:
    """Clipped (l, t, r, b) boxes for anchors moved by offsets."""
    return to_corners(decode_boxes(anchors.boxes, offsets, clip_to=anchors.image_size))


def _rescaled(corners: NDArray[np.float64], scale_x: float, scale_y: float) -> Box:
    left, top, right, bottom = corners
    return Box.from_corners(
        left * scale_x,
        top * scale_y,
        right * scale_x,
        bottom * scale_y,
    )


def _valid(corners: NDArray[np.float64]) -> NDArray[np.bool_]:
    return (corners[:, 2] > corners[:, 0]) & (corners[:, 3] > corners[:, 1])


def _detections(
    predictions: Predictions,
    index: int,
    image_shape: tuple[int, ...],
    image_id: str,
    *,
    conf_thresh: float,
    nms_thresh: float,
    top_k: int,
) -> list[Detection]:
    obj = None if predictions.obj is None else predictions.obj[index]
    scores = score(obj, predictions.cls[index])
    anchor_ids, class_ids = np.nonzero(scores > conf_thresh)
    if anchor_ids.size == 0 or top_k <= 0:
        return []
    unique = np.unique(anchor_ids)
    corners = np.zeros((len(predictions.anchors), 4))
    corners[unique] = to_corners(
        decode_boxes(
            predictions.anchors.boxes[unique],
            predictions.loc[index][unique],
            clip_to=predictions.anchors.image_size,
        ),
    )
    valid = _valid(corners[anchor_ids])
    anchor_ids, class_ids = anchor_ids[valid], class_ids[valid]

    found: list[tuple[float, int, int]] = []
    for class_index in np.unique(class_ids):
        members = anchor_ids[class_ids == class_index]
        values = scores[members, class_index]
        for kept in nms(corners[members], values, nms_thresh):
            found.append((float(values[kept]), int(class_index), int(members[kept])))
    # stable on (score desc), then class and anchor for determinism
    found.sort(key=lambda item: (-item[0], item[1], item[2]))

    size = predictions.anchors.image_size
    _, height, width = image_shape
    return [
        Detection(
            class_id=class_index + 1,
            score=min(max(value, 0.0), 1.0),
            box=_rescaled(corners[anchor], width / size, height / size),
            image_id=image_id,
        )
        for value, class_index, anchor in found[:top_k]
    ]


def detect_batch(
    model: TinyRON,
    images: Sequence[NDArray[np.floating]],
    image_ids: Sequence[str] | None = None,
    *,
    conf_thresh: float = CONF_THRESH,
    nms_thresh: float = NMS_THRESH,
    top_k: int = TOP_K,
) -> list[list[Detection]]:
    """Detections for every image, in image coordinates."""
    if not images:
        return []
    ids = list(image_ids) if image_ids is not None else [""] * len(images)
    predictions = predict(model, images)
    return [
        _detections(
            predictions,
            index,
            image.shape,
            ids[index],
            conf_thresh=conf_thresh,
            nms_thresh=nms_thresh,
            top_k=top_k,
        )
        for index, image in enumerate(images)
    ]


def detect(
    model: TinyRON,
    image: NDArray[np.floating],
    conf_thresh: float = CONF_THRESH,
    nms_thresh: float = NMS_THRESH,
    top_k: int = TOP_K,
    *,
    image_id: str = "",
) -> list[Detection]:
    """Scores above conf_thresh, decoded, per-class NMS, then the top_k by score."""
    return detect_batch(
        model,
        [image],
        [image_id],
        conf_thresh=conf_thresh,
        nms_thresh=nms_thresh,
        top_k=top_k,
    )[0]


def _proposals(
    predictions: Predictions,
    index: int,
    image_shape: tuple[int, ...],
    n: int,
    nms_thresh: float,
) -> list[Proposal]:
    if n <= 0:
        return []
    if predictions.obj is not None:
        confidence = predictions.obj[index]
    else:
        confidence = 1.0 - predictions.cls[index][:, 0]
    corners = _decoded(predictions.anchors, predictions.loc[index])
    candidates = np.flatnonzero(_valid(corners))
    ranked = nms(corners[candidates], confidence[candidates], nms_thresh, limit=n)
    kept = candidates[ranked]

    size = predictions.anchors.image_size
    _, height, width = image_shape
    return [
        Proposal(
            score=min(max(float(confidence[i]), 0.0), 1.0),
            box=_rescaled(corners[i], width / size, height / size),
        )
        for i in kept
    ]


def proposals_batch(
    model: TinyRON,
    images: Sequence[NDArray[np.floating]],
    n: int,
    nms_thresh: float = PROPOSAL_NMS_THRESH,
) -> list[list[Proposal]]:
    """Top-n class-agnostic proposals per image."""
    if not images:
        return []
    predictions = predict(model, images)
    return [
        _proposals(predictions, index, image.shape, n, nms_thresh)
        for index, image in enumerate(images)
    ]


def proposals(
    model: TinyRON,
    image: NDArray[np.floating],
    n: int,
    nms_thresh: float = PROPOSAL_NMS_THRESH,
) -> list[Proposal]:
    """Anchors ranked by objectness, decoded, class-agnostic NMS, top n."""
    return proposals_batch(model, [image], n, nms_thresh)[0]
