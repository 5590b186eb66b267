"""Full training runs on the synthetic shapes set; minutes of CPU each."""

import numpy as np
import pytest

from tinyron.assigner import iou_matrix
from tinyron.domain.models import Box, Sample
from tinyron.evaluation import evaluate, recall_curve
from tinyron.inference import detect, proposals_batch
from tinyron.network import TinyRON, build
from tinyron.settings import ModelConfig, TrainConfig
from tinyron.shapes import BACKGROUND, gen_shapes
from tinyron.trainer import TrainResult, train

pytestmark = pytest.mark.slow

TRAIN_IMAGES = 2000
TEST_IMAGES = 200
TEST_SEED = 10_000
WINDOW = 100


@pytest.fixture(scope="module")
def train_set() -> list[Sample]:
    """2000 training images."""
    return gen_shapes(TRAIN_IMAGES, seed=0)


@pytest.fixture(scope="module")
def test_set() -> list[Sample]:
    """200 held-out images from a disjoint seed."""
    return gen_shapes(TEST_IMAGES, seed=TEST_SEED)


def _build(samples: list[Sample], **overrides: object) -> tuple[TinyRON, TrainResult]:
    """Train a default-sized model from seed 0."""
    config = ModelConfig.model_validate(overrides)
    train_config = TrainConfig()
    model = build(config, train_config.seed)
    return model, train(model, samples, train_config)


@pytest.fixture(scope="module")
def trained(train_set: list[Sample]) -> tuple[TinyRON, TrainResult]:
    """The full model after the default 2000-iteration run."""
    return _build(train_set)


def test_loss_at_least_halves(trained: tuple[TinyRON, TrainResult]) -> None:
    """Mean loss over the last 100 iterations is at most half the first 100."""
    _, result = trained
    assert result.mean_total(-WINDOW) <= 0.5 * result.mean_total(0, WINDOW)


def test_map_on_held_out_shapes(
    trained: tuple[TinyRON, TrainResult],
    test_set: list[Sample],
) -> None:
    """AP@0.5 on unseen images reaches 0.8."""
    model, _ = trained
    report = evaluate(model, test_set, ["circle", "square", "triangle"])
    assert report.mean_ap >= 0.8


def test_objectness_prior_helps(
    trained: tuple[TinyRON, TrainResult],
    train_set: list[Sample],
    test_set: list[Sample],
) -> None:
    """Removing the objectness branch lowers mAP on the same seed."""
    classes = ["circle", "square", "triangle"]
    model, _ = trained
    ablated, _ = _build(train_set, use_objectness=False)
    with_prior = evaluate(model, test_set, classes).mean_ap
    without_prior = evaluate(ablated, test_set, classes).mean_ap
    assert without_prior < with_prior


def test_proposal_recall(
    trained: tuple[TinyRON, TrainResult],
    test_set: list[Sample],
) -> None:
    """Recall grows with N and covers 95% of objects by N = 50."""
    model, _ = trained
    boxes = []
    for start in range(0, len(test_set), 16):
        chunk = [s.image for s in test_set[start : start + 16]]
        ranked_lists = proposals_batch(model, chunk, 100)
        boxes.extend([p.box for p in ranked] for ranked in ranked_lists)
    gts = [s.annotation.objects for s in test_set]
    curve = recall_curve(boxes, gts, [1, 5, 10, 20, 50, 100])
    values = [recall for _, recall in curve]
    assert values == sorted(values)
    assert dict(curve)[50] >= 0.95


def test_isolated_square_is_found(trained: tuple[TinyRON, TrainResult]) -> None:
    """A lone high-contrast square is detected with the right class."""
    model, _ = trained
    image = np.full((3, 128, 128), BACKGROUND / 255.0)
    image[:, 40:80, 30:70] = [[[1.0]], [[0.0]], [[0.0]]]
    truth = Box.from_corners(30.0, 40.0, 70.0, 80.0)
    found = detect(model, image)
    squares = [d for d in found if d.class_id == 2]
    assert squares
    overlaps = iou_matrix([truth.corners()], [d.box.corners() for d in squares])
    assert overlaps.max() > 0.5


def test_all_scales_beat_top_scale_only(
    trained: tuple[TinyRON, TrainResult],
    train_set: list[Sample],
    test_set: list[Sample],
) -> None:
    """Detecting from layers 4..7 is at least as good as layer 7 alone."""
    classes = ["circle", "square", "triangle"]
    model, _ = trained
    top_only, _ = _build(train_set, detection_scales=(7,))
    full_map = evaluate(model, test_set, classes).mean_ap
    assert full_map >= evaluate(top_only, test_set, classes).mean_ap

