"""Multi-task objective: objectness, localization and gated classification terms.

Each term is a raw sum over its selected anchors plus the number of anchors it
summed over; :func:`total` normalizes each term by its count once and weights
them alpha, beta and 1 - alpha - beta.
"""

import logging
from collections.abc import Sequence
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray

from tinyron.anchors import AnchorSet
from tinyron.assigner import Assignment, SampleSelection
from tinyron.domain.enums import Precision
from tinyron.domain.errors import ConfigurationError
from tinyron.domain.models import LossReport
from tinyron.tensor import Tensor, add, cross_entropy, scale, smooth_l1

logger = logging.getLogger(__name__)

ALPHA = 1 / 3
BETA = 1 / 3


class LossTerm(NamedTuple):
    """Raw summed loss (None when nothing was selected) and the count it sums over."""

    value: Tensor | None
    count: int

    @property
    def raw(self) -> float:
        """Raw sum as a float, 0 for a dropped term."""
        return self.value.item() if self.value is not None else 0.0


def _batched(
    per_image: Sequence[tuple[NDArray[np.intp], NDArray[np.intp]]],
) -> tuple[NDArray[np.intp], NDArray[np.intp], NDArray[np.intp]]:
    """Flatten per-image (anchor ids, targets) into (anchor ids, batch ids, targets)."""
    ids = [anchor_ids for anchor_ids, _ in per_image]
    targets = [target for _, target in per_image]
    batch = [np.full(len(a), n, dtype=np.intp) for n, a in enumerate(ids)]
    if not ids:
        none = np.zeros(0, dtype=np.intp)
        return none, none, none
    return (
        np.concatenate(ids).astype(np.intp),
        np.concatenate(batch),
        np.concatenate(targets).astype(np.intp),
    )


def _sum_terms(terms: list[Tensor]) -> Tensor | None:
    if not terms:
        return None
    result = terms[0]
    for term in terms[1:]:
        result = add(result, term)
    return result


def _categorical(
    probs: Sequence[Tensor],
    anchors: AnchorSet,
    per_image: Sequence[tuple[NDArray[np.intp], NDArray[np.intp]]],
) -> LossTerm:
    anchor_ids, batch_ids, targets = _batched(per_image)
    maps = dict(zip(anchors.layers, probs, strict=True))
    terms = []
    for layer, positions, sites in anchors.sites(anchor_ids, batch_ids):
        prob_map = maps[layer]
        group = prob_map.shape[1] // anchors.per_location
        terms.append(cross_entropy(prob_map, group, sites, targets[positions]))
    return LossTerm(_sum_terms(terms), int(anchor_ids.size))


def objectness_loss(
    obj_probs: Sequence[Tensor],
    anchors: AnchorSet,
    selections: Sequence[SampleSelection],
) -> LossTerm:
    """Cross-entropy of the 2-way objectness softmax against object / background."""
    per_image = [
        (
            np.concatenate([s.obj_positive, s.obj_negative]),
            np.concatenate(
                [
                    np.ones(s.obj_positive.size, np.intp),
                    np.zeros(s.obj_negative.size, np.intp),
                ],
            ),
        )
        for s in selections
    ]
    return _categorical(obj_probs, anchors, per_image)


def classification_loss(
    cls_probs: Sequence[Tensor],
    anchors: AnchorSet,
    selections: Sequence[SampleSelection],
    assignments: Sequence[Assignment],
) -> LossTerm:
    """Cross-entropy of the (K+1)-way softmax; gated negatives carry class 0."""
    per_image = [
        (
            np.concatenate([s.det_positive, s.det_negative]),
            np.concatenate(
                [a.classes[s.det_positive], np.zeros(s.det_negative.size, np.intp)],
            ),
        )
        for s, a in zip(selections, assignments, strict=True)
    ]
    return _categorical(cls_probs, anchors, per_image)


def localization_loss(
    loc_preds: Sequence[Tensor],
    anchors: AnchorSet,
    assignments: Sequence[Assignment],
) -> LossTerm:
    """Smooth-L1 over the four offsets of every positive anchor."""
    anchor_ids, batch_ids, _ = _batched(
        [(a.positives, a.classes[a.positives]) for a in assignments],
    )
    targets = np.concatenate(
        [a.targets[a.positives] for a in assignments] or [np.zeros((0, 4))],
    )
    maps = dict(zip(anchors.layers, loc_preds, strict=True))
    terms = [
        smooth_l1(maps[layer], sites, targets[positions])
        for layer, positions, sites in anchors.sites(anchor_ids, batch_ids)
    ]
    return LossTerm(_sum_terms(terms), int(anchor_ids.size))


def total(
    obj: LossTerm | None,
    loc: LossTerm,
    cls: LossTerm,
    *,
    alpha: float = ALPHA,
    beta: float = BETA,
    precision: Precision = Precision.STANDARD,
) -> Tensor:
    """alpha L_obj/N_obj + beta L_loc/N_loc + (1-alpha-beta) L_cls/N_cls.

    A term with nothing selected contributes 0 and is reported; its weight is
    not redistributed. obj=None means the objectness branch does not exist.
    """
    if alpha < 0.0 or beta < 0.0 or alpha + beta > 1.0:
        msg = f"Invalid loss weights alpha={alpha}, beta={beta}"
        raise ConfigurationError(msg)
    weighted = []
    for label, term, weight in (
        ("objectness", obj, alpha),
        ("localization", loc, beta),
        ("classification", cls, 1.0 - alpha - beta),
    ):
        if term is None:
            continue
        if term.value is None or term.count == 0:
            logger.warning("Dropping empty %s loss term", label)
            continue
        weighted.append(scale(term.value, weight / term.count))
    return _sum_terms(weighted) or Tensor.scalar(0.0, precision)


def report(
    obj: LossTerm | None,
    loc: LossTerm,
    cls: LossTerm,
    value: Tensor,
) -> LossReport:
    """Plain-number summary of one step's loss."""
    obj = obj or LossTerm(None, 0)
    return LossReport(
        obj_loss=obj.raw,
        loc_loss=loc.raw,
        cls_loss=cls.raw,
        obj_count=obj.count,
        loc_count=loc.count,
        cls_count=cls.count,
        total=value.item(),
    )
