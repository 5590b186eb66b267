import logging
import math

import numpy as np
import pytest

from tinyron.anchors import AnchorSet, generate
from tinyron.assigner import Assignment, SampleSelection, match, sample
from tinyron.domain.errors import ConfigurationError
from tinyron.domain.models import Box, GroundTruth
from tinyron.loss import (
    LossTerm,
    classification_loss,
    localization_loss,
    objectness_loss,
    report,
    total,
)
from tinyron.settings import ModelConfig
from tinyron.tensor import Tensor

_GTS = [
    GroundTruth(class_id=1, box=Box(cx=20.0, cy=20.0, w=16.0, h=16.0)),
    GroundTruth(class_id=2, box=Box(cx=44.0, cy=40.0, w=30.0, h=26.0)),
]


def _build() -> tuple[ModelConfig, AnchorSet, list[Assignment], list[SampleSelection]]:
    """64px, two-class setup with one annotated image and its selection."""
    config = ModelConfig(input_size=64, num_classes=2)
    anchors = generate(config)
    assignments = [match(anchors, _GTS)]
    rng = np.random.default_rng(0)
    selections = [sample(assignments[0], np.ones(len(anchors), dtype=bool), rng)]
    return config, anchors, assignments, selections


def _uniform_maps(anchors: AnchorSet, group: int) -> list[Tensor]:
    """Per-scale probability maps with every distribution uniform."""
    return [
        Tensor(
            np.full(
                (1, group * anchors.per_location, *(anchors.extents[n],) * 2),
                1.0 / group,
            ),
        )
        for n in anchors.layers
    ]


def _scalar(value: float) -> Tensor:
    """Scalar float64 tensor."""
    return Tensor(np.full((1, 1, 1, 1), value))


def test_objectness_loss_on_uniform_probabilities() -> None:
    """Every selected anchor costs log 2 under a uniform 2-way softmax."""
    _, anchors, _, selections = _build()
    term = objectness_loss(_uniform_maps(anchors, 2), anchors, selections)
    selected = selections[0].obj_positive.size + selections[0].obj_negative.size
    assert term.count == selected
    assert term.raw == pytest.approx(selected * math.log(2.0))


def test_classification_loss_counts_gated_anchors() -> None:
    """The class term covers positives plus gated negatives at log(K+1) each."""
    _, anchors, assignments, selections = _build()
    maps = _uniform_maps(anchors, 3)
    term = classification_loss(maps, anchors, selections, assignments)
    selected = selections[0].det_positive.size + selections[0].det_negative.size
    assert term.count == selected
    assert term.raw == pytest.approx(selected * math.log(3.0))


def test_classification_targets_use_matched_class() -> None:
    """A map certain of the right classes has zero loss on positives."""
    _, anchors, assignments, _ = _build()
    positives = assignments[0].positives
    only_positives = [
        SampleSelection(
            obj_positive=positives,
            obj_negative=np.zeros(0, dtype=np.intp),
            det_positive=positives,
            det_negative=np.zeros(0, dtype=np.intp),
        ),
    ]
    maps = []
    for layer in anchors.layers:
        side = anchors.extents[layer]
        data = np.zeros((1, 3 * anchors.per_location, side, side))
        maps.append(data)
    for anchor in positives:
        layer = int(anchors.layer[anchor])
        box = int(anchors.box_index[anchor])
        y, x = int(anchors.grid_y[anchor]), int(anchors.grid_x[anchor])
        target = int(assignments[0].classes[anchor])
        maps[anchors.layers.index(layer)][0, 3 * box + target, y, x] = 1.0
    term = classification_loss(
        [Tensor(m) for m in maps],
        anchors,
        only_positives,
        assignments,
    )
    assert term.raw == pytest.approx(0.0)
    assert term.count == positives.size


def test_localization_loss_zero_at_targets() -> None:
    """Predicting exactly t* gives zero regression loss."""
    _, anchors, assignments, _ = _build()
    assignment = assignments[0]
    maps = []
    for layer in anchors.layers:
        side = anchors.extents[layer]
        maps.append(np.zeros((1, 4 * anchors.per_location, side, side)))
    for anchor in assignment.positives:
        layer = int(anchors.layer[anchor])
        box = int(anchors.box_index[anchor])
        y, x = int(anchors.grid_y[anchor]), int(anchors.grid_x[anchor])
        maps[anchors.layers.index(layer)][0, 4 * box : 4 * box + 4, y, x] = (
            assignment.targets[anchor]
        )
    term = localization_loss([Tensor(m) for m in maps], anchors, assignments)
    assert term.count == assignment.positives.size
    assert term.raw == pytest.approx(0.0)


def test_total_normalizes_each_term() -> None:
    """Each term is divided by its own count before weighting."""
    value = total(
        LossTerm(_scalar(6.0), 3),
        LossTerm(_scalar(4.0), 2),
        LossTerm(_scalar(9.0), 3),
        alpha=0.25,
        beta=0.25,
    )
    assert value.item() == pytest.approx(0.25 * 2.0 + 0.25 * 2.0 + 0.5 * 3.0)


def test_total_drops_empty_terms(caplog: pytest.LogCaptureFixture) -> None:
    """An empty term contributes zero, keeps its weight unused and is logged."""
    with caplog.at_level(logging.WARNING):
        value = total(
            LossTerm(_scalar(6.0), 3),
            LossTerm(None, 0),
            LossTerm(_scalar(9.0), 3),
        )
    assert value.item() == pytest.approx(2.0 / 3 + 3.0 / 3)
    assert "localization" in caplog.text


def test_total_without_objectness() -> None:
    """A missing objectness branch is skipped silently."""
    value = total(None, LossTerm(_scalar(2.0), 1), LossTerm(_scalar(3.0), 1))
    assert value.item() == pytest.approx((2.0 + 3.0) / 3)


def test_total_of_nothing_is_zero() -> None:
    """With every term empty the loss is a zero scalar."""
    value = total(LossTerm(None, 0), LossTerm(None, 0), LossTerm(None, 0))
    assert value.item() == 0.0


def test_total_rejects_negative_class_weight() -> None:
    """alpha + beta above 1 is refused before any term is weighted."""
    terms = (LossTerm(_scalar(1.0), 1), LossTerm(_scalar(0.0), 1))
    with pytest.raises(ConfigurationError, match="alpha=0.6"):
        total(*terms, LossTerm(_scalar(5.0), 1), alpha=0.6, beta=0.6)


def test_report_normalizes_components() -> None:
    """LossReport carries raw sums, counts and per-count means."""
    obj = LossTerm(_scalar(6.0), 3)
    loc = LossTerm(_scalar(4.0), 2)
    cls = LossTerm(None, 0)
    summary = report(obj, loc, cls, _scalar(1.5))
    assert summary.obj_normalized == pytest.approx(2.0)
    assert summary.loc_normalized == pytest.approx(2.0)
    assert summary.cls_normalized == 0.0
    assert summary.total == 1.5
