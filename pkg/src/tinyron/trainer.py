"""Joint end-to-end training: augmentation, multi-scale inputs and the SGD loop."""

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO

import numpy as np
from numpy.typing import NDArray

from tinyron.anchors import AnchorSet, generate
from tinyron.assigner import gate, match, pass_fraction, sample
from tinyron.domain.enums import AugmentOption
from tinyron.domain.errors import InputError, NumericError, StorageError
from tinyron.domain.models import Annotation, Box, GroundTruth, LossReport, Sample
from tinyron.formats import resize
from tinyron.loss import (
    classification_loss,
    localization_loss,
    objectness_loss,
    report,
    total,
)
from tinyron.network import TinyRON, flatten_maps, normalize_images
from tinyron.repository import CheckpointRepository
from tinyron.settings import TrainConfig, require_divisible
from tinyron.tensor import SGD, Graph, backward

logger = logging.getLogger(__name__)

CROP_FRACTIONS = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
CROP_TRIES = 50
MIN_KEPT_AREA = 0.25
LOG_COLUMNS = ("iter", "L_obj", "L_loc", "L_cls", "total", "lr")


def _scaled(
    annotation: Annotation,
    factor_x: float,
    factor_y: float,
    size: int,
) -> Annotation:
    objects = [
        gt.model_copy(
            update={
                "box": Box(
                    cx=gt.box.cx * factor_x,
                    cy=gt.box.cy * factor_y,
                    w=gt.box.w * factor_x,
                    h=gt.box.h * factor_y,
                ),
            },
        )
        for gt in annotation.objects
    ]
    return annotation.model_copy(
        update={"width": size, "height": size, "objects": objects},
    )


def flip(item: Sample) -> Sample:
    """Mirror image and boxes horizontally."""
    width = item.annotation.width
    objects = [
        gt.model_copy(
            update={"box": gt.box.model_copy(update={"cx": width - gt.box.cx})},
        )
        for gt in item.annotation.objects
    ]
    return Sample(
        image=np.ascontiguousarray(item.image[:, :, ::-1]),
        annotation=item.annotation.model_copy(update={"objects": objects}),
    )


def _crop_objects(
    objects: Sequence[GroundTruth],
    left: int,
    top: int,
    edge: int,
) -> list[GroundTruth]:
    """Objects whose center lies in the patch, clipped and shifted into it.

    Clipped boxes keeping less than a quarter of their area are dropped.
    """
    kept = []
    for gt in objects:
        box = gt.box
        if not (left <= box.cx < left + edge and top <= box.cy < top + edge):
            continue
        moved = Box(cx=box.cx - left, cy=box.cy - top, w=box.w, h=box.h)
        shifted = moved.clip(edge, edge)
        if shifted is None or shifted.area < MIN_KEPT_AREA * box.area:
            continue
        kept.append(gt.model_copy(update={"box": shifted}))
    return kept


def crop(item: Sample, rng: np.random.Generator) -> Sample | None:
    """Random square patch holding at least one object center; None after 50 misses."""
    annotation = item.annotation
    fraction = CROP_FRACTIONS[int(rng.integers(len(CROP_FRACTIONS)))]
    edge = round(fraction * min(annotation.width, annotation.height))
    for _ in range(CROP_TRIES):
        left = int(rng.integers(0, annotation.width - edge + 1))
        top = int(rng.integers(0, annotation.height - edge + 1))
        kept = _crop_objects(annotation.objects, left, top, edge)
        if kept:
            patch = item.image[:, top : top + edge, left : left + edge]
            return Sample(
                image=np.ascontiguousarray(patch),
                annotation=annotation.model_copy(
                    update={"width": edge, "height": edge, "objects": kept},
                ),
            )
    return None


def augment(
    item: Sample,
    rng: np.random.Generator,
    output_size: int | None = None,
) -> tuple[Sample, AugmentOption]:
    """Original, horizontal flip or patch crop, chosen uniformly, then rescaled.

    Images without objects are never cropped. A crop that finds no object
    center in 50 tries falls back to the original image.
    """
    options = list(AugmentOption)
    if not item.annotation.objects:
        options.remove(AugmentOption.CROP)
    option = options[int(rng.integers(len(options)))]

    result = item
    if option is AugmentOption.FLIP:
        result = flip(item)
    elif option is AugmentOption.CROP:
        cropped = crop(item, rng)
        if cropped is None:
            logger.debug("No crop found for %s, using the original", item.image_id)
            option = AugmentOption.ORIGINAL
        else:
            result = cropped

    size = output_size or item.annotation.width
    annotation = result.annotation
    if annotation.width == size and annotation.height == size:
        return result, option
    return (
        Sample(
            image=resize(result.image, size),
            annotation=_scaled(
                annotation,
                size / annotation.width,
                size / annotation.height,
                size,
            ),
        ),
        option,
    )


def multiscale_sample(config: TrainConfig, rng: np.random.Generator) -> int:
    """Uniform choice of this iteration's input size from config.train_sizes."""
    for size in config.train_sizes:
        require_divisible(size)
    return int(config.train_sizes[int(rng.integers(len(config.train_sizes)))])


@dataclass
class TrainResult:
    """Per-iteration loss reports of a finished run."""

    reports: list[LossReport] = field(default_factory=list)
    pass_fractions: list[float] = field(default_factory=list)
    skipped: int = 0

    def mean_total(self, start: int, stop: int | None = None) -> float:
        """Mean total loss over reports[start:stop]."""
        window = self.reports[start:stop]
        return float(np.mean([r.total for r in window])) if window else 0.0


class TrainingLog:
    """CSV writer for the per-iteration loss log."""

    def __init__(self, path: Path | None) -> None:
        """Open path for writing and emit the header row; None disables the log."""
        self._handle: TextIO | None = None
        if path is None:
            return
        try:
            self._handle = path.open("w", encoding="utf-8", newline="")
        except OSError as exc:
            msg = f"Cannot open training log {path}"
            raise StorageError(msg) from exc
        self._writer = csv.writer(self._handle)
        self._writer.writerow(LOG_COLUMNS)

    def write(self, iteration: int, loss: LossReport, lr: float) -> None:
        """Append one row of normalized loss components."""
        if self._handle is None:
            return
        self._writer.writerow(
            (
                iteration,
                f"{loss.obj_normalized:.6f}",
                f"{loss.loc_normalized:.6f}",
                f"{loss.cls_normalized:.6f}",
                f"{loss.total:.6f}",
                f"{lr:g}",
            ),
        )

    def close(self) -> None:
        """Flush and close the file."""
        if self._handle is not None:
            self._handle.close()
            self._handle = None


class Trainer:
    """Owns the model and optimizer state of one training run."""

    def __init__(
        self,
        model: TinyRON,
        config: TrainConfig,
        *,
        checkpoints: CheckpointRepository | None = None,
        log_path: Path | None = None,
    ) -> None:
        """Prepare the optimizer and the run's random stream."""
        self.model = model
        self.config = config
        self.checkpoints = checkpoints
        self.log_path = log_path
        self.rng = np.random.default_rng(config.seed)
        self.optimizer = SGD(
            model.named_parameters(),
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        self._anchors: dict[int, AnchorSet] = {}

    def anchors(self, size: int) -> AnchorSet:
        """Default boxes for an input size, generated once per size."""
        if size not in self._anchors:
            self._anchors[size] = generate(self.model.config, size)
        return self._anchors[size]

    def step(
        self,
        batch: Sequence[Sample],
        size: int,
        lr: float,
    ) -> tuple[LossReport, float, bool]:
        """Forward, assign, gate, sample, loss, backward and update on one batch.

        Returns the loss report, the gate pass fraction and whether the update
        was applied (a batch with nothing selected is skipped).
        """
        model_config = self.model.config
        anchors = self.anchors(size)
        images = np.stack([item.image for item in batch])
        with Graph() as graph:
            inputs = normalize_images(images, model_config.precision)
            outputs = self.model.forward(inputs)
            obj_probs = outputs.obj_probs()
            cls_probs = outputs.cls_probs()

            assignments = [match(anchors, item.annotation.objects) for item in batch]
            if obj_probs is not None:
                p1 = flatten_maps(obj_probs, 2)[:, :, 1]
                masks = [gate(row, self.config.o_p) for row in p1]
                passed = pass_fraction(p1, self.config.o_p)
            else:
                masks = [np.ones(len(anchors), dtype=bool) for _ in batch]
                passed = 1.0
            selections = [
                sample(
                    assignment,
                    mask,
                    self.rng,
                    neg_pos_ratio=self.config.neg_pos_ratio,
                    use_objectness=model_config.use_objectness,
                )
                for assignment, mask in zip(assignments, masks, strict=True)
            ]

            obj = (
                objectness_loss(obj_probs, anchors, selections)
                if obj_probs is not None
                else None
            )
            loc = localization_loss(outputs.loc_preds(), anchors, assignments)
            cls = classification_loss(cls_probs, anchors, selections, assignments)
            value = total(
                obj,
                loc,
                cls,
                alpha=self.config.alpha,
                beta=self.config.beta,
                precision=model_config.precision,
            )

        loss = report(obj, loc, cls, value)
        if all(selection.is_empty for selection in selections):
            logger.warning("Skipping update: nothing selected in this batch")
            return loss, passed, False
        self.optimizer.zero_grad()
        backward(graph, value)
        self.optimizer.step(lr)
        return loss, passed, True

    def run(self, samples: Sequence[Sample]) -> TrainResult:
        """Run config.total_iters iterations on batches drawn uniformly from samples."""
        if not samples:
            msg = "Cannot train on an empty dataset"
            raise InputError(msg)
        config = self.config
        result = TrainResult()
        log = TrainingLog(self.log_path)
        try:
            for iteration in range(config.total_iters):
                lr = config.lr_at(iteration)
                size = multiscale_sample(config, self.rng)
                picks = self.rng.integers(0, len(samples), size=config.batch_size)
                batch = [augment(samples[int(i)], self.rng, size)[0] for i in picks]
                try:
                    loss, passed, applied = self.step(batch, size, lr)
                except NumericError as exc:
                    if self.checkpoints is not None:
                        self.checkpoints.dump_nan(iteration, self.model)
                    msg = f"Non-finite values at iteration {iteration}: {exc}"
                    raise NumericError(msg) from exc

                result.reports.append(loss)
                result.pass_fractions.append(passed)
                result.skipped += not applied
                log.write(iteration, loss, lr)
                if (iteration + 1) % config.log_every == 0:
                    logger.info(
                        "iter %d: loss %.4f (obj %.4f, loc %.4f, cls %.4f) "
                        "lr %g, gate %.3f",
                        iteration + 1,
                        loss.total,
                        loss.obj_normalized,
                        loss.loc_normalized,
                        loss.cls_normalized,
                        lr,
                        passed,
                    )
                due = (iteration + 1) % config.checkpoint_every == 0
                if self.checkpoints is not None and due:
                    self.checkpoints.checkpoint(iteration + 1, self.model)
        finally:
            log.close()

        if self.checkpoints is not None:
            self.checkpoints.final(self.model)
        return result


def train(
    model: TinyRON,
    samples: Sequence[Sample],
    config: TrainConfig,
    *,
    checkpoints: CheckpointRepository | None = None,
    log_path: Path | None = None,
) -> TrainResult:
    """Train model in place; deterministic for a fixed config.seed."""
    trainer = Trainer(model, config, checkpoints=checkpoints, log_path=log_path)
    return trainer.run(samples)
