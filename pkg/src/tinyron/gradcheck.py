"""Central finite-difference checks of every differentiable op and the full loss.

Each case builds 64-bit inputs and a closure recomputing a scalar from their
current data; map-valued ops are reduced with a fixed random weighting.
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict

from tinyron.anchors import generate
from tinyron.assigner import match, sample
from tinyron.domain.enums import Precision
from tinyron.domain.errors import ConfigurationError
from tinyron.domain.models import Box, GroundTruth
from tinyron.loss import classification_loss, localization_loss, objectness_loss, total
from tinyron.network import ScaleOutput, ScaleOutputs, build, normalize_images
from tinyron.settings import SCALE_STRIDES, ModelConfig
from tinyron.tensor import (
    Graph,
    Sites,
    Tensor,
    add,
    backward,
    concat_channels,
    conv2d,
    cross_entropy,
    deconv2d,
    maxpool2,
    relu,
    scale,
    smooth_l1,
    softmax_groups,
    weighted_sum,
)

logger = logging.getLogger(__name__)

EPSILON = 1e-5
TOLERANCE = 1e-4
ABS_FLOOR = 1e-9
REL_FLOOR = 1e-7
# whole-network checks cross relu and max-pool kinks
CASE_TOLERANCE = {"network": 1e-3}

type Forward = Callable[[], Tensor]


@dataclass(frozen=True, slots=True)
class Case:
    """Tensors to differentiate and the scalar function of them."""

    inputs: list[Tensor]
    forward: Forward


class GradCheckResult(BaseModel):
    """Outcome of one finite-difference check."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    op: str
    coordinates: int
    max_abs_error: float
    max_rel_error: float
    passed: bool


def relative_error(analytic: float, numeric: float) -> float:
    """|a - n| / max(|a| + |n|, 1e-7)."""
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), REL_FLOOR)


def _param(rng: np.random.Generator, shape: tuple[int, ...], name: str) -> Tensor:
    return Tensor(
        rng.normal(size=shape),
        requires_grad=True,
        name=name,
        precision=Precision.VERIFICATION,
    )


def _reduced(fn: Forward, rng: np.random.Generator) -> Forward:
    weights = rng.normal(size=fn().shape)
    return lambda: weighted_sum(fn(), weights)


def _away_from(values: np.ndarray, point: float, margin: float) -> np.ndarray:
    """Push values at least margin away from a kink at point."""
    offset = values - point
    return point + np.sign(offset) * (margin + np.abs(offset))


def _conv(rng: np.random.Generator) -> Case:
    x = _param(rng, (2, 3, 6, 6), "x")
    w = _param(rng, (4, 3, 3, 3), "w")
    b = _param(rng, (1, 4, 1, 1), "b")
    return Case([x, w, b], _reduced(lambda: conv2d(x, w, b, stride=1, pad=1), rng))


def _conv_strided(rng: np.random.Generator) -> Case:
    x = _param(rng, (2, 3, 6, 6), "x")
    w = _param(rng, (4, 3, 2, 2), "w")
    b = _param(rng, (1, 4, 1, 1), "b")
    return Case([x, w, b], _reduced(lambda: conv2d(x, w, b, stride=2), rng))


def _deconv(rng: np.random.Generator) -> Case:
    x = _param(rng, (2, 4, 3, 3), "x")
    w = _param(rng, (4, 3, 2, 2), "w")
    b = _param(rng, (1, 3, 1, 1), "b")
    return Case([x, w, b], _reduced(lambda: deconv2d(x, w, b), rng))


def _maxpool(rng: np.random.Generator) -> Case:
    x = _param(rng, (2, 3, 6, 6), "x")
    return Case([x], _reduced(lambda: maxpool2(x), rng))


def _relu(rng: np.random.Generator) -> Case:
    x = _param(rng, (2, 3, 5, 5), "x")
    x.data[...] = _away_from(x.data, 0.0, 0.05)
    return Case([x], _reduced(lambda: relu(x), rng))


def _add(rng: np.random.Generator) -> Case:
    a = _param(rng, (2, 3, 4, 4), "a")
    b = _param(rng, (2, 3, 4, 4), "b")
    return Case([a, b], _reduced(lambda: add(a, b), rng))


def _scale(rng: np.random.Generator) -> Case:
    x = _param(rng, (2, 3, 5, 5), "x")
    return Case([x], _reduced(lambda: scale(x, -0.7), rng))


def _concat(rng: np.random.Generator) -> Case:
    a = _param(rng, (2, 2, 4, 4), "a")
    b = _param(rng, (2, 3, 4, 4), "b")
    return Case([a, b], _reduced(lambda: concat_channels(a, b), rng))


def _softmax(rng: np.random.Generator) -> Case:
    x = _param(rng, (2, 6, 4, 4), "x")
    return Case([x], _reduced(lambda: softmax_groups(x, 3), rng))


def _random_sites(
    rng: np.random.Generator,
    count: int,
    boxes: int,
    extent: int,
) -> Sites:
    return Sites(
        batch=rng.integers(0, 2, count),
        box=rng.integers(0, boxes, count),
        y=rng.integers(0, extent, count),
        x=rng.integers(0, extent, count),
    )


def _cross_entropy(rng: np.random.Generator) -> Case:
    probs = Tensor(
        rng.uniform(0.05, 1.0, size=(2, 6, 4, 4)),
        requires_grad=True,
        name="probs",
        precision=Precision.VERIFICATION,
    )
    sites = _random_sites(rng, 20, 2, 4)
    targets = rng.integers(0, 3, 20)
    return Case([probs], lambda: cross_entropy(probs, 3, sites, targets))


def _smooth_l1(rng: np.random.Generator) -> Case:
    pred = _param(rng, (2, 8, 4, 4), "pred")
    pred.data[...] *= 1.5
    sites = _random_sites(rng, 20, 2, 4)
    channels = sites.box[:, None] * 4 + np.arange(4)
    picked = pred.data[
        sites.batch[:, None], channels, sites.y[:, None], sites.x[:, None]
    ]
    raw = rng.normal(size=picked.shape)
    targets = picked - np.sign(raw) * _away_from(np.abs(raw), 1.0, 0.05)
    return Case([pred], lambda: smooth_l1(pred, sites, targets))


def _weighted_sum(rng: np.random.Generator) -> Case:
    x = _param(rng, (2, 3, 4, 4), "x")
    weights = rng.normal(size=x.shape)
    return Case([x], lambda: weighted_sum(x, weights))


def _check_config(**overrides: object) -> ModelConfig:
    values: dict[str, object] = {
        "input_size": 64,
        "num_classes": 2,
        "stem_channels": (4, 4, 4),
        "backbone_channels": (4, 4, 4, 4),
        "rf_channels": 4,
        "precision": Precision.VERIFICATION,
    }
    values.update(overrides)
    return ModelConfig.model_validate(values)


def _objective(
    config: ModelConfig,
    rng: np.random.Generator,
) -> Callable[[ScaleOutputs], Tensor]:
    """Training loss of a fixed two-image batch as a function of head outputs."""
    anchors = generate(config)
    batch = (
        [
            GroundTruth(class_id=1, box=Box(cx=20.0, cy=22.0, w=18.0, h=14.0)),
            GroundTruth(class_id=2, box=Box(cx=44.0, cy=40.0, w=30.0, h=34.0)),
        ],
        [GroundTruth(class_id=2, box=Box(cx=32.0, cy=30.0, w=40.0, h=36.0))],
    )
    assignments = [match(anchors, gts) for gts in batch]
    passing = np.ones(len(anchors), dtype=bool)
    selections = [sample(a, passing, rng) for a in assignments]

    def objective(outputs: ScaleOutputs) -> Tensor:
        obj_probs = outputs.obj_probs()
        obj = (
            objectness_loss(obj_probs, anchors, selections)
            if obj_probs is not None
            else None
        )
        loc = localization_loss(outputs.loc_preds(), anchors, assignments)
        cls = classification_loss(outputs.cls_probs(), anchors, selections, assignments)
        return total(obj, loc, cls, precision=config.precision)

    return objective


def _heads_loss(rng: np.random.Generator) -> Case:
    config = _check_config()
    objective = _objective(config, rng)
    per_location = config.anchors_per_location
    scales = []
    leaves = []
    for layer in config.detection_scales:
        extent = config.input_size // SCALE_STRIDES[layer]
        obj, cls, loc = (
            _param(rng, (2, group * per_location, extent, extent), f"head{layer}.{kind}")
            for kind, group in (("obj", 2), ("cls", config.num_classes + 1), ("loc", 4))
        )
        leaves.extend((obj, cls, loc))
        scales.append(
            ScaleOutput(layer=layer, obj_logits=obj, cls_logits=cls, loc_preds=loc),
        )
    outputs = ScaleOutputs(scales=tuple(scales), num_classes=config.num_classes)
    return Case(leaves, lambda: objective(outputs))


def _network_loss(rng: np.random.Generator) -> Case:
    config = _check_config(init_std=0.3)
    objective = _objective(config, rng)
    model = build(config, 0)
    images = normalize_images(rng.uniform(size=(2, 3, 64, 64)), config.precision)
    return Case(
        list(model.named_parameters().values()),
        lambda: objective(model.forward(images)),
    )


CASES: dict[str, Callable[[np.random.Generator], Case]] = {
    "conv2d": _conv,
    "conv2d_strided": _conv_strided,
    "deconv2d": _deconv,
    "maxpool2": _maxpool,
    "relu": _relu,
    "add": _add,
    "scale": _scale,
    "concat_channels": _concat,
    "softmax_groups": _softmax,
    "cross_entropy": _cross_entropy,
    "smooth_l1": _smooth_l1,
    "weighted_sum": _weighted_sum,
    "loss": _heads_loss,
    "network": _network_loss,
}
# ops and the loss over head outputs; "network" runs only when named
DEFAULT_SUITE = tuple(name for name in CASES if name != "network")


def _coordinates(
    case: Case,
    count: int,
    rng: np.random.Generator,
) -> list[tuple[int, int]]:
    """(input, flat index) pairs; every input gets a share, all of it if small."""
    sizes = [t.data.size for t in case.inputs]
    if sum(sizes) <= count:
        return [(i, j) for i, size in enumerate(sizes) for j in range(size)]
    picks = []
    for _ in range(count):
        tensor = int(rng.integers(len(sizes)))
        picks.append((tensor, int(rng.integers(sizes[tensor]))))
    return picks


def check_case(
    name: str,
    case: Case,
    *,
    coordinates: int = 100,
    seed: int = 0,
    tolerance: float = TOLERANCE,
    epsilon: float = EPSILON,
) -> GradCheckResult:
    """Compare backward() against central differences at sampled coordinates."""
    for tensor in case.inputs:
        tensor.zero_grad()
    with Graph() as graph:
        out = case.forward()
    backward(graph, out)
    grads = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in case.inputs
    ]

    rng = np.random.default_rng(seed)
    picks = _coordinates(case, coordinates, rng)
    worst_abs = 0.0
    worst_rel = 0.0
    passed = True
    for tensor_index, flat in picks:
        data = case.inputs[tensor_index].data.reshape(-1)
        original = data[flat]
        data[flat] = original + epsilon
        upper = case.forward().item()
        data[flat] = original - epsilon
        lower = case.forward().item()
        data[flat] = original
        numeric = (upper - lower) / (2 * epsilon)
        analytic = float(grads[tensor_index].reshape(-1)[flat])
        error = abs(analytic - numeric)
        rel = relative_error(analytic, numeric)
        worst_abs = max(worst_abs, error)
        if error >= ABS_FLOOR:
            worst_rel = max(worst_rel, rel)
            passed = passed and rel < tolerance
    result = GradCheckResult(
        op=name,
        coordinates=len(picks),
        max_abs_error=worst_abs,
        max_rel_error=worst_rel,
        passed=passed,
    )
    logger.info(
        "gradcheck %s: %d coordinates, max rel %.2e, %s",
        name,
        result.coordinates,
        result.max_rel_error,
        "ok" if passed else "FAILED",
    )
    return result


def check_op(
    name: str,
    *,
    coordinates: int = 100,
    seed: int = 0,
    tolerance: float | None = None,
) -> GradCheckResult:
    """Run the named check on freshly drawn inputs.

    Without an explicit tolerance the op's own default applies.
    """
    if name not in CASES:
        msg = f"Unknown gradcheck op {name!r}; choose from {', '.join(CASES)}"
        raise ConfigurationError(msg)
    case = CASES[name](np.random.default_rng(seed))
    if tolerance is None:
        tolerance = CASE_TOLERANCE.get(name, TOLERANCE)
    return check_case(
        name,
        case,
        coordinates=coordinates,
        seed=seed,
        tolerance=tolerance,
    )


def run_suite(
    ops: Sequence[str] | None = None,
    *,
    coordinates: int = 100,
    seed: int = 0,
    tolerance: float | None = None,
) -> list[GradCheckResult]:
    """Check every named op (DEFAULT_SUITE when ops is empty)."""
    names = list(ops) if ops else list(DEFAULT_SUITE)
    return [
        check_op(name, coordinates=coordinates, seed=seed, tolerance=tolerance)
        for name in names
    ]
