import numpy as np
import pytest

from tinyron.anchors import AnchorSet, generate, to_centers
from tinyron.assigner import (
    Assignment,
    gate,
    iou,
    iou_matrix,
    match,
    pass_fraction,
    sample,
)
from tinyron.domain.enums import AnchorLabel
from tinyron.domain.models import Box, GroundTruth
from tinyron.settings import ModelConfig


def _build(corners: np.ndarray) -> AnchorSet:
    """AnchorSet over arbitrary (l, t, r, b) boxes on a single pseudo-scale."""
    count = corners.shape[0]
    zeros = np.zeros(count, dtype=np.intp)
    return AnchorSet(
        image_size=64,
        layers=(4,),
        boxes=to_centers(corners),
        layer=np.full(count, 4, dtype=np.intp),
        grid_y=zeros,
        grid_x=zeros,
        box_index=np.arange(count, dtype=np.intp),
        starts={4: 0},
        extents={4: 1},
        sizes={4: (1.0, 1.0)},
        per_location=count,
    )


def _random_corners(rng: np.random.Generator, count: int) -> np.ndarray:
    """Random boxes inside a 64px square."""
    left = rng.uniform(0, 48, count)
    top = rng.uniform(0, 48, count)
    width = rng.uniform(4, 32, count)
    height = rng.uniform(4, 32, count)
    return np.column_stack([left, top, left + width, top + height])


def _scalar_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two (l, t, r, b) boxes, computed one pair at a time."""
    inter_w = max(min(a[2], b[2]) - max(a[0], b[0]), 0.0)
    inter_h = max(min(a[3], b[3]) - max(a[1], b[1]), 0.0)
    inter = inter_w * inter_h
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _brute_force(anchors: np.ndarray, gts: np.ndarray) -> list[int]:
    """Reference labels: threshold every anchor, then force each gt's best anchor."""
    table = [[_scalar_iou(a, g) for g in gts] for a in anchors]
    labels = []
    for row in table:
        best = max(row)
        if best > 0.5:
            labels.append(row.index(best))
        elif best < 0.3:
            labels.append(int(AnchorLabel.NEGATIVE))
        else:
            labels.append(int(AnchorLabel.IGNORE))
    best_of_gt = [max(table[i][g] for i in range(len(anchors))) for g in range(len(gts))]
    taken: set[int] = set()
    for g in sorted(range(len(gts)), key=lambda g: (-best_of_gt[g], g)):
        choice = -1
        for i in range(len(anchors)):
            if i in taken:
                continue
            if choice < 0 or table[i][g] > table[choice][g]:
                choice = i
        taken.add(choice)
        labels[choice] = g
    return labels


def _ground_truths(corners: np.ndarray) -> list[GroundTruth]:
    """One class-1 GroundTruth per row."""
    return [GroundTruth(class_id=1, box=Box.from_corners(*row)) for row in corners]


def test_iou_of_known_boxes() -> None:
    """Two 2x1 boxes sharing half their width have IoU 1/3; disjoint boxes 0."""
    a = Box.from_corners(0, 0, 2, 1)
    b = Box.from_corners(1, 0, 3, 1)
    assert iou(a, b) == pytest.approx(1 / 3)
    assert iou(a, Box.from_corners(5, 5, 6, 6)) == 0.0
    table = iou_matrix([[0, 0, 1, 1]], [[0, 0, 1, 1], [0, 0, 2, 2]])
    assert table.tolist() == [[1.0, 0.25]]


@pytest.mark.parametrize("seed", range(10))
def test_matching_equals_brute_force(seed: int) -> None:
    """Two-step assignment equals the exhaustive reference on random instances."""
    rng = np.random.default_rng(seed)
    for _ in range(100):
        anchors = _random_corners(rng, int(rng.integers(10, 201)))
        gts = _random_corners(rng, int(rng.integers(1, 11)))
        anchor_set = _build(anchors)
        truths = _ground_truths(gts)
        assignment = match(anchor_set, truths)
        stored = np.array([gt.box.corners() for gt in truths])
        assert assignment.matched.tolist() == _brute_force(anchor_set.corners, stored)
        covered = set(assignment.matched[assignment.positives].tolist())
        assert covered == set(range(len(gts)))


def test_contested_anchor_goes_to_higher_iou() -> None:
    """When two gts share a best anchor, the weaker one falls back to its next best."""
    anchors = np.array([[0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]])
    gts = np.array([[0.0, 0.0, 10.0, 9.0], [0.0, 0.0, 10.0, 6.0]])
    assignment = match(_build(anchors), _ground_truths(gts))
    assert assignment.matched.tolist() == [0, 1]


def test_no_ground_truth_means_all_negative() -> None:
    """An empty image labels every anchor negative."""
    assignment = match(_build(_random_corners(np.random.default_rng(0), 20)), [])
    assert (assignment.matched == AnchorLabel.NEGATIVE).all()
    assert assignment.positives.size == 0


def test_targets_encode_matched_gt() -> None:
    """Positive anchors carry the class and t* of their matched gt."""
    config = ModelConfig(input_size=64, s_min=8.0)
    anchors = generate(config)
    gt = GroundTruth(class_id=2, box=Box(cx=20.0, cy=20.0, w=8.0, h=8.0))
    assignment = match(anchors, [gt])
    exact = anchors.flat_index(4, 2, 2, 2)
    assert assignment.matched[exact] == 0
    assert assignment.classes[exact] == 2
    np.testing.assert_allclose(assignment.targets[exact], 0.0, atol=1e-12)
    assert (assignment.classes[assignment.negatives] == 0).all()


def test_gate_threshold_inclusive() -> None:
    """p >= o_p passes."""
    assert gate([0.02, 0.03, 0.5], 0.03).tolist() == [False, True, True]


def test_gate_pass_count_monotone() -> None:
    """Raising o_p never lets more anchors through; o_p = 0 passes all."""
    probs = np.random.default_rng(0).uniform(size=5000)
    counts = [int(gate(probs, o_p).sum()) for o_p in np.linspace(0, 1, 101)]
    assert counts[0] == probs.size
    assert all(np.diff(counts) <= 0)
    assert pass_fraction(probs, 0.0) == 1.0
    assert 0.9 < pass_fraction(probs, 0.03) < 1.0


def test_sample_ratio_and_gating() -> None:
    """Negatives are capped at 3 per positive; detection negatives pass the gate."""
    rng = np.random.default_rng(0)
    anchors = _random_corners(rng, 200)
    assignment = match(_build(anchors), _ground_truths(_random_corners(rng, 3)))
    mask = rng.uniform(size=200) > 0.5
    selection = sample(assignment, mask, rng)
    positives = assignment.positives.size
    assert selection.obj_positive.tolist() == assignment.positives.tolist()
    assert selection.det_positive.tolist() == assignment.positives.tolist()
    assert selection.obj_negative.size <= 3 * positives
    assert selection.det_negative.size <= 3 * positives
    assert set(selection.obj_negative) <= set(assignment.negatives)
    assert mask[selection.det_negative].all()
    assert len(set(selection.obj_negative.tolist())) == selection.obj_negative.size


def test_sample_without_objectness() -> None:
    """Without the objectness branch only the detection branch is fed."""
    rng = np.random.default_rng(1)
    assignment = match(
        _build(_random_corners(rng, 50)),
        _ground_truths(_random_corners(rng, 2)),
    )
    selection = sample(assignment, np.ones(50, dtype=bool), rng, use_objectness=False)
    assert selection.obj_positive.size == 0
    assert selection.obj_negative.size == 0
    assert selection.det_positive.size == assignment.positives.size


def test_sample_empty_image() -> None:
    """No positives means a zero negative quota and an empty selection."""
    assignment = match(_build(_random_corners(np.random.default_rng(2), 30)), [])
    selection = sample(assignment, np.ones(30, dtype=bool), np.random.default_rng(0))
    assert selection.is_empty


def _pool(positives: int, negatives: int) -> Assignment:
    """Assignment with the first anchors positive and the rest negative."""
    count = positives + negatives
    matched = np.full(count, int(AnchorLabel.NEGATIVE), dtype=np.intp)
    matched[:positives] = np.arange(positives)
    return Assignment(
        matched=matched,
        classes=np.where(matched >= 0, 1, 0).astype(np.intp),
        targets=np.zeros((count, 4)),
        max_iou=np.zeros(count),
    )


def test_sample_repeats_under_fixed_seed() -> None:
    """The same seed draws the same selection."""
    assignment = _pool(3, 100)
    mask = np.random.default_rng(0).uniform(size=103) > 0.3
    first = sample(assignment, mask, np.random.default_rng(5))
    second = sample(assignment, mask, np.random.default_rng(5))
    assert first.obj_negative.tolist() == second.obj_negative.tolist()
    assert first.det_negative.tolist() == second.det_negative.tolist()


def test_negatives_drawn_uniformly() -> None:
    """Each negative is picked at the rate quota / pool, within binomial bounds."""
    positives, negatives, trials = 2, 40, 4000
    assignment = _pool(positives, negatives)
    mask = np.ones(positives + negatives, dtype=bool)
    rng = np.random.default_rng(11)
    counts = np.zeros(positives + negatives)
    for _ in range(trials):
        selection = sample(assignment, mask, rng)
        assert selection.obj_negative.size == 3 * positives
        counts[selection.obj_negative] += 1
    rate = 3 * positives / negatives
    sigma = np.sqrt(trials * rate * (1 - rate))
    assert not counts[:positives].any()
    assert np.abs(counts[positives:] - trials * rate).max() <= 4 * sigma
