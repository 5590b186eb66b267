"""VOC-style detection metrics, proposal recall and objectness concentration."""

import csv
import logging
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from tinyron.anchors import generate
from tinyron.assigner import iou_matrix
from tinyron.domain.errors import InputError, StorageError, UnsupportedConfigurationError
from tinyron.domain.models import Box, Detection, GroundTruth, PRCurve, Sample
from tinyron.inference import detect_batch, predict
from tinyron.network import TinyRON

logger = logging.getLogger(__name__)

IOU_THRESH = 0.5
COCO_THRESHOLDS = tuple(float(t) for t in np.linspace(0.5, 0.95, 10))
RECALL_POINTS = np.linspace(0.0, 1.0, 11)
CONCENTRATED_IOU = 0.5
BACKGROUND_IOU = 0.1
CSV_COLUMNS = ("class_id", "name", "ap", "ground_truths", "detections")

type GroundTruths = Mapping[str, Sequence[GroundTruth]]


def voc_ap(
    recall: NDArray[np.float64],
    precision: NDArray[np.float64],
    *,
    all_point: bool = False,
) -> float:
    """Area under a PR curve: 11-point interpolation, or every recall step."""
    if all_point:
        mrec = np.concatenate(([0.0], recall, [1.0]))
        mpre = np.concatenate(([0.0], precision, [0.0]))
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        steps = np.flatnonzero(mrec[1:] != mrec[:-1])
        value = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    else:
        points = [
            float(precision[recall >= t].max()) if (recall >= t).any() else 0.0
            for t in RECALL_POINTS
        ]
        value = float(np.mean(points))
    return min(max(value, 0.0), 1.0)


def ap(
    detections: Iterable[Detection],
    ground_truths: GroundTruths,
    class_id: int,
    iou_thresh: float = IOU_THRESH,
    *,
    all_point: bool = False,
) -> PRCurve | None:
    """AP of one class; None when the class has no (non-difficult) ground truth.

    Detections are taken in descending score order. Each one is matched to
    its highest-IoU ground truth of the class in the same image; it is a true
    positive when that IoU is at least iou_thresh and the ground truth is still
    free. Matches to difficult objects count as neither.
    """
    boxes: dict[str, NDArray[np.float64]] = {}
    difficult: dict[str, NDArray[np.bool_]] = {}
    taken: dict[str, NDArray[np.bool_]] = {}
    positives = 0
    for image_id, gts in ground_truths.items():
        own = [gt for gt in gts if gt.class_id == class_id]
        boxes[image_id] = np.array([gt.box.corners() for gt in own]).reshape(-1, 4)
        difficult[image_id] = np.array([gt.difficult for gt in own], dtype=bool)
        taken[image_id] = np.zeros(len(own), dtype=bool)
        positives += sum(not gt.difficult for gt in own)
    if positives == 0:
        return None

    ranked = sorted(
        (d for d in detections if d.class_id == class_id),
        key=lambda d: -d.score,
    )
    tp = np.zeros(len(ranked))
    fp = np.zeros(len(ranked))
    for index, detection in enumerate(ranked):
        candidates = boxes.get(detection.image_id, np.zeros((0, 4)))
        if candidates.shape[0] == 0:
            fp[index] = 1
            continue
        overlaps = iou_matrix([detection.box.corners()], candidates)[0]
        best = int(overlaps.argmax())
        if overlaps[best] < iou_thresh:
            fp[index] = 1
        elif difficult[detection.image_id][best]:
            continue
        elif taken[detection.image_id][best]:
            fp[index] = 1
        else:
            tp[index] = 1
            taken[detection.image_id][best] = True

    tp_sum = np.cumsum(tp)
    fp_sum = np.cumsum(fp)
    counted = tp_sum + fp_sum
    recall = tp_sum / positives
    precision = np.divide(tp_sum, counted, out=np.zeros_like(tp_sum), where=counted > 0)
    return PRCurve(
        recall=recall.tolist(),
        precision=precision.tolist(),
        ap=voc_ap(recall, precision, all_point=all_point),
    )


def average_precisions(
    detections: Sequence[Detection],
    ground_truths: GroundTruths,
    num_classes: int,
    iou_thresh: float = IOU_THRESH,
    *,
    all_point: bool = False,
) -> dict[int, PRCurve]:
    """PR curve of every class with at least one ground truth."""
    curves = {}
    for class_id in range(1, num_classes + 1):
        curve = ap(detections, ground_truths, class_id, iou_thresh, all_point=all_point)
        if curve is None:
            logger.debug("Class %d has no ground truth; AP undefined", class_id)
            continue
        curves[class_id] = curve
    return curves


def mean_ap(per_class: Iterable[float]) -> float:
    """Arithmetic mean of the defined per-class APs."""
    values = list(per_class)
    if not values:
        msg = "mAP needs at least one class with ground truth"
        raise InputError(msg)
    return float(np.mean(values))


def coco_style_ap(
    detections: Sequence[Detection],
    ground_truths: GroundTruths,
    num_classes: int,
    *,
    all_point: bool = False,
) -> float:
    """mAP averaged over IoU thresholds 0.5, 0.55, ..., 0.95."""
    return float(
        np.mean(
            [
                mean_ap(
                    c.ap
                    for c in average_precisions(
                        detections,
                        ground_truths,
                        num_classes,
                        thresh,
                        all_point=all_point,
                    ).values()
                )
                for thresh in COCO_THRESHOLDS
            ],
        ),
    )


def recall_at(
    proposals: Sequence[Sequence[Box]],
    ground_truths: Sequence[Sequence[GroundTruth]],
    n: int,
    iou: float = IOU_THRESH,
) -> float:
    """Share of ground truths with IoU >= iou against a top-n proposal of their image."""
    covered = 0
    count = 0
    for boxes, gts in zip(proposals, ground_truths, strict=True):
        targets = [gt.box.corners() for gt in gts if not gt.difficult]
        count += len(targets)
        top = [box.corners() for box in boxes[: max(n, 0)]]
        if not targets or not top:
            continue
        covered += int((iou_matrix(targets, top).max(axis=1) >= iou).sum())
    return covered / count if count else 0.0


def recall_curve(
    proposals: Sequence[Sequence[Box]],
    ground_truths: Sequence[Sequence[GroundTruth]],
    ns: Sequence[int],
    iou: float = IOU_THRESH,
) -> list[tuple[int, float]]:
    """(N, recall@N) for every N in ns."""
    return [(n, recall_at(proposals, ground_truths, n, iou)) for n in ns]


def objectness_concentration(
    model: TinyRON,
    samples: Sequence[Sample],
    *,
    batch_size: int = 16,
) -> tuple[float, float]:
    """Mean p1 on anchors over objects (IoU > 0.5) and on background (IoU < 0.1)."""
    if not model.config.use_objectness:
        msg = "objectness concentration needs a model with the objectness prior"
        raise UnsupportedConfigurationError(msg)
    size = model.config.input_size
    anchors = generate(model.config, size)
    on_objects: list[NDArray[np.float64]] = []
    on_background: list[NDArray[np.float64]] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        predictions = predict(model, [s.image for s in chunk])
        if predictions.obj is None:
            continue
        for index, item in enumerate(chunk):
            scale_x = size / item.annotation.width
            scale_y = size / item.annotation.height
            corners = [gt.box.corners() for gt in item.annotation.objects]
            gts = np.array(corners).reshape(-1, 4)
            gts *= (scale_x, scale_y, scale_x, scale_y)
            best = (
                iou_matrix(anchors.corners, gts).max(axis=1)
                if gts.size
                else np.zeros(len(anchors))
            )
            on_objects.append(predictions.obj[index][best > CONCENTRATED_IOU])
            on_background.append(predictions.obj[index][best < BACKGROUND_IOU])
    inside = np.concatenate(on_objects) if on_objects else np.zeros(0)
    outside = np.concatenate(on_background) if on_background else np.zeros(0)
    return (
        float(inside.mean()) if inside.size else 0.0,
        float(outside.mean()) if outside.size else 0.0,
    )


class ClassMetrics(BaseModel):
    """AP of one class and the counts behind it."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    class_id: int
    name: str
    ap: float = Field(ge=0.0, le=1.0)
    ground_truths: int = Field(ge=0)
    detections: int = Field(ge=0)


class MetricsReport(BaseModel):
    """Everything the eval command writes."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    mean_ap: float
    iou_thresh: float
    all_point: bool
    coco_ap: float | None = None
    images: int
    per_class: list[ClassMetrics]


def detect_all(
    model: TinyRON,
    samples: Sequence[Sample],
    *,
    batch_size: int = 16,
) -> list[Detection]:
    """Detections over every sample, evaluated batch_size images per forward pass."""
    found: list[Detection] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        per_image = detect_batch(
            model,
            [s.image for s in chunk],
            [s.image_id for s in chunk],
        )
        for detections in per_image:
            found.extend(detections)
    return found


def evaluate(
    model: TinyRON,
    samples: Sequence[Sample],
    class_names: Sequence[str],
    *,
    iou_thresh: float = IOU_THRESH,
    all_point: bool = False,
    coco_style: bool = False,
    batch_size: int = 16,
) -> MetricsReport:
    """Detect on every sample and score the detections against its annotations."""
    detections = detect_all(model, samples, batch_size=batch_size)
    ground_truths = {s.image_id: s.annotation.objects for s in samples}
    num_classes = len(class_names)
    curves = average_precisions(
        detections,
        ground_truths,
        num_classes,
        iou_thresh,
        all_point=all_point,
    )
    per_class = [
        ClassMetrics(
            class_id=class_id,
            name=class_names[class_id - 1],
            ap=curve.ap,
            ground_truths=sum(
                1
                for gts in ground_truths.values()
                for gt in gts
                if gt.class_id == class_id and not gt.difficult
            ),
            detections=sum(1 for d in detections if d.class_id == class_id),
        )
        for class_id, curve in curves.items()
    ]
    report = MetricsReport(
        mean_ap=mean_ap(c.ap for c in curves.values()),
        iou_thresh=iou_thresh,
        all_point=all_point,
        coco_ap=(
            coco_style_ap(detections, ground_truths, num_classes, all_point=all_point)
            if coco_style
            else None
        ),
        images=len(samples),
        per_class=per_class,
    )
    logger.info(
        "mAP@%.2f = %.4f over %d images",
        iou_thresh,
        report.mean_ap,
        len(samples),
    )
    return report


def write_metrics(
    report: MetricsReport,
    json_path: Path,
    csv_path: Path | None = None,
) -> None:
    """Write the JSON report and, optionally, the per-class CSV next to it."""
    try:
        json_path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        if csv_path is not None:
            with csv_path.open("w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(CSV_COLUMNS)
                writer.writerows(
                    (
                        row.class_id,
                        row.name,
                        f"{row.ap:.6f}",
                        row.ground_truths,
                        row.detections,
                    )
                    for row in report.per_class
                )
    except OSError as exc:
        msg = f"Failed to write metrics to {json_path}"
        raise StorageError(msg) from exc


def write_recall_curve(curve: Sequence[tuple[int, float]], path: Path) -> None:
    """Write the (N, recall) curve as CSV."""
    try:
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("N", "recall"))
            for n, recall in curve:
                writer.writerow((n, f"{recall:.6f}"))
    except OSError as exc:
        msg = f"Failed to write recall curve {path}"
        raise StorageError(msg) from exc
