from pathlib import Path

import numpy as np
import pytest

from tinyron.domain.enums import AugmentOption, ShapeKind
from tinyron.domain.errors import ConfigurationError, InputError, NumericError
from tinyron.domain.models import Annotation, Box, GroundTruth, Sample
from tinyron.network import build
from tinyron.repository import CheckpointRepository
from tinyron.settings import ModelConfig, TrainConfig
from tinyron.shapes import gen_shapes
from tinyron.tensor import SGD
from tinyron.trainer import (
    CROP_FRACTIONS,
    augment,
    crop,
    flip,
    multiscale_sample,
    train,
)

_KINDS = (ShapeKind.CIRCLE, ShapeKind.SQUARE)


def _build(**overrides: object) -> ModelConfig:
    """Narrow 64px, two-class network config."""
    values: dict[str, object] = {
        "input_size": 64,
        "num_classes": 2,
        "stem_channels": (4, 4, 4),
        "backbone_channels": (4, 4, 4, 4),
        "rf_channels": 4,
    }
    values.update(overrides)
    return ModelConfig.model_validate(values)


def _train_config(**overrides: object) -> TrainConfig:
    """A handful of 64px iterations on batches of two."""
    values: dict[str, object] = {
        "batch_size": 2,
        "total_iters": 3,
        "checkpoint_every": 2,
        "train_sizes": (64,),
        "base_lr": 1e-3,
        "schedule": (),
        "log_every": 1,
    }
    values.update(overrides)
    return TrainConfig.model_validate(values)


def _sample() -> Sample:
    """A 64x64 image holding one 20x10 box in its upper-left quarter."""
    image = np.zeros((3, 64, 64))
    image[0, 5:15, 10:30] = 1.0
    annotation = Annotation(
        image_id="one",
        width=64,
        height=64,
        objects=[GroundTruth(class_id=1, box=Box.from_corners(10.0, 5.0, 30.0, 15.0))],
    )
    return Sample(image=image, annotation=annotation)


def test_flip_mirrors_image_and_boxes() -> None:
    """The box moves with the pixels it covers."""
    flipped = flip(_sample())
    box = flipped.annotation.objects[0].box
    assert box.corners() == pytest.approx((34.0, 5.0, 54.0, 15.0))
    assert flipped.image[0, 5:15, 34:54].min() == 1.0
    assert flipped.image[0].sum() == _sample().image[0].sum()


def test_crop_keeps_object_centers() -> None:
    """Crops are squares that contain at least one object, shifted into the patch."""
    rng = np.random.default_rng(0)
    for _ in range(20):
        cropped = crop(_sample(), rng)
        assert cropped is not None
        edge = cropped.annotation.width
        assert cropped.annotation.height == edge
        assert cropped.image.shape == (3, edge, edge)
        for gt in cropped.annotation.objects:
            left, top, right, bottom = gt.box.corners()
            assert 0.0 <= left < right <= edge
            assert 0.0 <= top < bottom <= edge


def test_augment_rescales_to_requested_size() -> None:
    """Every option comes back at the training size with boxes rescaled."""
    rng = np.random.default_rng(1)
    seen = set()
    for _ in range(30):
        result, option = augment(_sample(), rng, 128)
        seen.add(option)
        assert result.image.shape == (3, 128, 128)
        assert result.annotation.width == result.annotation.height == 128
        if option is AugmentOption.ORIGINAL:
            box = result.annotation.objects[0].box
            assert box.corners() == pytest.approx((20.0, 10.0, 60.0, 30.0))
    assert seen == set(AugmentOption)


def test_augment_never_crops_empty_images() -> None:
    """Images without objects only get the original or the flip."""
    empty = Sample(
        image=np.zeros((3, 64, 64)),
        annotation=Annotation(image_id="e", width=64, height=64),
    )
    rng = np.random.default_rng(2)
    options = {augment(empty, rng)[1] for _ in range(20)}
    assert AugmentOption.CROP not in options


def test_multiscale_sample_draws_configured_sizes() -> None:
    """Sizes come from train_sizes and must fit the strides."""
    rng = np.random.default_rng(0)
    config = TrainConfig(train_sizes=(128, 192))
    assert {multiscale_sample(config, rng) for _ in range(50)} == {128, 192}
    with pytest.raises(ConfigurationError):
        multiscale_sample(TrainConfig(train_sizes=(100,)), rng)


def test_train_writes_log_and_checkpoints(tmp_path: Path) -> None:
    """A short run logs every iteration and saves periodic plus final weights."""
    samples = gen_shapes(4, classes=_KINDS, seed=0, image_size=64)
    model = build(_build(), 0)
    checkpoints = CheckpointRepository(tmp_path / "run")
    result = train(
        model,
        samples,
        _train_config(),
        checkpoints=checkpoints,
        log_path=tmp_path / "train.csv",
    )
    assert len(result.reports) == 3
    assert all(np.isfinite(r.total) for r in result.reports)
    assert all(0.0 <= f <= 1.0 for f in result.pass_fractions)
    names = [path.name for path in checkpoints.list_all()]
    assert names == ["ckpt_2.ronw", "final.ronw"]
    rows = (tmp_path / "train.csv").read_text().splitlines()
    assert rows[0] == "iter,L_obj,L_loc,L_cls,total,lr"
    assert len(rows) == 4


def test_zero_iterations_still_writes_final(tmp_path: Path) -> None:
    """total_iters=0 leaves the weights untouched but saved."""
    samples = gen_shapes(2, classes=_KINDS, seed=0, image_size=64)
    checkpoints = CheckpointRepository(tmp_path)
    result = train(
        build(_build(), 0),
        samples,
        _train_config(total_iters=0),
        checkpoints=checkpoints,
    )
    assert result.reports == []
    assert [path.name for path in checkpoints.list_all()] == ["final.ronw"]


def test_training_is_deterministic() -> None:
    """Same seeds, same losses and same weights."""
    samples = gen_shapes(4, classes=_KINDS, seed=1, image_size=64)
    first, second = build(_build(), 0), build(_build(), 0)
    a = train(first, samples, _train_config())
    b = train(second, samples, _train_config())
    assert [r.total for r in a.reports] == [r.total for r in b.reports]
    for name, param in first.named_parameters().items():
        np.testing.assert_array_equal(param.data, second.named_parameters()[name].data)


def test_training_without_objectness() -> None:
    """The ablated model trains with no objectness term at all."""
    samples = gen_shapes(4, classes=_KINDS, seed=2, image_size=64)
    result = train(build(_build(use_objectness=False), 0), samples, _train_config())
    assert all(r.obj_count == 0 for r in result.reports)
    assert all(f == 1.0 for f in result.pass_fractions)


def test_non_finite_weights_abort_with_dump(tmp_path: Path) -> None:
    """NaN in the model aborts training and dumps nan_<iter>."""
    samples = gen_shapes(2, classes=_KINDS, seed=0, image_size=64)
    model = build(_build(), 0)
    next(iter(model.named_parameters().values())).data[...] = np.nan
    checkpoints = CheckpointRepository(tmp_path)
    with pytest.raises(NumericError, match="iteration 0"):
        train(model, samples, _train_config(), checkpoints=checkpoints)
    assert (tmp_path / "nan_0.ronw").exists()
    assert not (tmp_path / "final.ronw").exists()


def test_empty_dataset_is_rejected() -> None:
    """Training needs at least one sample."""
    with pytest.raises(InputError):
        train(build(_build(), 0), [], _train_config())


def _centered() -> Sample:
    """A 64x64 image with one 10x10 box around its center."""
    annotation = Annotation(
        image_id="mid",
        width=64,
        height=64,
        objects=[GroundTruth(class_id=1, box=Box.from_corners(27.0, 27.0, 37.0, 37.0))],
    )
    return Sample(image=np.zeros((3, 64, 64)), annotation=annotation)


def test_crop_edge_fractions_are_uniform() -> None:
    """Over 10^4 crops each of the six edge fractions shows up about equally."""
    rng = np.random.default_rng(3)
    item = _centered()
    edges = {round(f * 64): 0 for f in CROP_FRACTIONS}
    trials = 10_000
    for _ in range(trials):
        cropped = crop(item, rng)
        assert cropped is not None
        assert cropped.annotation.objects
        edges[cropped.annotation.width] += 1
    rate = 1 / len(CROP_FRACTIONS)
    sigma = np.sqrt(trials * rate * (1 - rate))
    assert len(edges) == len(CROP_FRACTIONS)
    assert all(abs(count - trials * rate) <= 4 * sigma for count in edges.values())


def test_multiscale_sizes_are_equally_likely() -> None:
    """Two training sizes are drawn half the time each."""
    rng = np.random.default_rng(4)
    config = TrainConfig(train_sizes=(128, 192))
    trials = 10_000
    small = sum(multiscale_sample(config, rng) == 128 for _ in range(trials))
    assert abs(small - trials / 2) <= 3 * np.sqrt(trials / 4)


def test_zero_gradient_step_decays_weights() -> None:
    """Without gradients an update only shrinks parameters toward zero."""
    model = build(_build(init_std=0.1), 0)
    params = model.named_parameters()
    before = {name: p.data.copy() for name, p in params.items()}
    SGD(params, momentum=0.9, weight_decay=5e-4).step(0.1)
    for name, param in params.items():
        old = before[name]
        nonzero = old != 0
        assert (np.abs(param.data[nonzero]) < np.abs(old[nonzero])).all()
        assert (np.sign(param.data) == np.sign(old)).all()
        assert not param.data[~nonzero].any()
