"""TinyRON: a stride-faithful tiny backbone, reverse connection blocks and heads.

Backbone layers 4..7 sit at strides 8, 16, 32 and 64. rf-map 7 is a 3x3 conv of
layer 7; rf-map n (n < 7) adds the 2x deconvolution of rf-map n+1 to a 3x3
lateral conv of layer n. Each enabled scale carries an objectness head, a
classification head (two inception blocks then a 3x3 conv) and a class-agnostic
regression head.
"""

import logging
import zlib
from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from tinyron.domain.enums import Precision
from tinyron.domain.errors import DimensionError
from tinyron.settings import SCALE_STRIDES, SIZE_MULTIPLE, ModelConfig, require_divisible
from tinyron.tensor import (
    Tensor,
    add,
    concat_channels,
    conv2d,
    deconv2d,
    maxpool2,
    relu,
    softmax_groups,
)

logger = logging.getLogger(__name__)

IMAGE_CHANNELS = 3
TOP_LAYER = max(SCALE_STRIDES)


@dataclass(frozen=True, slots=True)
class LayerInit:
    """Weight initialization shared by every layer of one model."""

    std: float
    seed: int
    precision: Precision

    def rng(self, name: str) -> np.random.Generator:
        """Independent stream per layer name, so ablated models share common weights."""
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def weight(self, name: str, shape: tuple[int, ...]) -> Tensor:
        """N(0, std^2) weights drawn from the layer's stream."""
        return Tensor(
            self.rng(name).normal(0.0, self.std, shape),
            requires_grad=True,
            name=f"{name}.weight",
            precision=self.precision,
        )

    def bias(self, name: str, channels: int) -> Tensor:
        """Zero bias, broadcast over batch and space."""
        return Tensor(
            np.zeros((1, channels, 1, 1)),
            requires_grad=True,
            name=f"{name}.bias",
            precision=self.precision,
        )


class Conv2d:
    """Convolution layer."""

    def __init__(
        self,
        name: str,
        c_in: int,
        c_out: int,
        kernel: int,
        init: LayerInit,
        *,
        stride: int = 1,
        pad: int = 0,
    ) -> None:
        """Allocate weight (c_out, c_in, k, k) and bias."""
        self.weight = init.weight(name, (c_out, c_in, kernel, kernel))
        self.bias = init.bias(name, c_out)
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        """Apply the convolution."""
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)

    def parameters(self) -> Iterator[Tensor]:
        """Weight then bias."""
        yield self.weight
        yield self.bias


class Deconv2d:
    """2x2 stride-2 transposed convolution."""

    def __init__(self, name: str, c_in: int, c_out: int, init: LayerInit) -> None:
        """Allocate weight (c_in, c_out, 2, 2) and bias."""
        self.weight = init.weight(name, (c_in, c_out, 2, 2))
        self.bias = init.bias(name, c_out)

    def __call__(self, x: Tensor) -> Tensor:
        """Upsample by two."""
        return deconv2d(x, self.weight, self.bias, stride=2)

    def parameters(self) -> Iterator[Tensor]:
        """Weight then bias."""
        yield self.weight
        yield self.bias


class Inception:
    """1x1 and 3x3 branches of R/2 channels each, relu, concatenated."""

    def __init__(self, name: str, channels: int, init: LayerInit) -> None:
        """Build both branches."""
        half = channels // 2
        self.branch1 = Conv2d(f"{name}.branch1", channels, half, 1, init)
        self.branch3 = Conv2d(f"{name}.branch3", channels, half, 3, init, pad=1)

    def __call__(self, x: Tensor) -> Tensor:
        """Run both branches and merge them along channels."""
        return concat_channels(relu(self.branch1(x)), relu(self.branch3(x)))

    def parameters(self) -> Iterator[Tensor]:
        """Parameters of both branches."""
        yield from self.branch1.parameters()
        yield from self.branch3.parameters()


@dataclass(frozen=True, slots=True)
class ScaleOutput:
    """Raw head outputs of one detection scale."""

    layer: int
    obj_logits: Tensor | None
    cls_logits: Tensor
    loc_preds: Tensor


@dataclass(frozen=True, slots=True)
class ScaleOutputs:
    """Head outputs of every enabled scale, ordered by layer."""

    scales: tuple[ScaleOutput, ...]
    num_classes: int

    def obj_probs(self) -> list[Tensor] | None:
        """2-way softmax of each objectness map; None without the objectness prior."""
        logits = [scale.obj_logits for scale in self.scales]
        if any(item is None for item in logits):
            return None
        return [softmax_groups(item, 2) for item in logits if item is not None]

    def cls_probs(self) -> list[Tensor]:
        """(K+1)-way softmax of each classification map."""
        return [softmax_groups(s.cls_logits, self.num_classes + 1) for s in self.scales]

    def loc_preds(self) -> list[Tensor]:
        """Regression maps."""
        return [scale.loc_preds for scale in self.scales]


def anchor_major(data: NDArray[np.floating], group: int) -> NDArray[np.floating]:
    """(N, A*group, H, W) head map -> (N, H*W*A, group), anchors in (y, x, a) order."""
    N, C, H, W = data.shape
    boxes = C // group
    view = data.reshape(N, boxes, group, H, W).transpose(0, 3, 4, 1, 2)
    return view.reshape(N, H * W * boxes, group)


def flatten_maps(maps: list[Tensor], group: int) -> NDArray[np.floating]:
    """Concatenate anchor-major views of per-scale maps into (N, anchors, group)."""
    return np.concatenate([anchor_major(m.data, group) for m in maps], axis=1)


def normalize_images(
    images: NDArray[np.floating],
    precision: Precision = Precision.STANDARD,
) -> Tensor:
    """Images in [0, 1] -> network input, mean-shifted by 0.5."""
    return Tensor(np.asarray(images) - 0.5, precision=precision, name="images")


class TinyRON:
    """The detector: backbone, reverse connection and per-scale heads."""

    def __init__(self, config: ModelConfig, seed: int) -> None:
        """Build every layer needed by config.detection_scales."""
        require_divisible(config.input_size)
        self.config = config
        self.seed = seed
        init = LayerInit(std=config.init_std, seed=seed, precision=config.precision)
        s1, s2, s3 = config.stem_channels
        channels = dict(zip(SCALE_STRIDES, config.backbone_channels, strict=True))
        r = config.rf_channels
        a = config.anchors_per_location

        self.backbone = {
            "conv1": Conv2d("backbone.conv1", IMAGE_CHANNELS, s1, 3, init, pad=1),
            "conv2": Conv2d("backbone.conv2", s1, s2, 3, init, pad=1),
            "conv3": Conv2d("backbone.conv3", s2, s3, 3, init, pad=1),
            "conv4": Conv2d("backbone.conv4", s3, channels[4], 3, init, pad=1),
            "conv5": Conv2d("backbone.conv5", channels[4], channels[5], 3, init, pad=1),
            "conv6": Conv2d("backbone.conv6", channels[5], channels[6], 3, init, pad=1),
            "conv7": Conv2d(
                "backbone.conv7",
                channels[6],
                channels[7],
                2,
                init,
                stride=2,
            ),
        }
        lowest = min(config.detection_scales)
        self.top = Conv2d("fusion.top7", channels[TOP_LAYER], r, 3, init, pad=1)
        self.lateral = {
            n: Conv2d(f"fusion.lateral{n}", channels[n], r, 3, init, pad=1)
            for n in range(lowest, TOP_LAYER)
        }
        self.deconv = {
            n: Deconv2d(f"fusion.deconv{n}", r, r, init)
            for n in range(lowest, TOP_LAYER)
        }

        k1 = config.num_classes + 1
        self.obj_head: dict[int, Conv2d] = {}
        self.cls_blocks: dict[int, tuple[Inception, Inception]] = {}
        self.cls_head: dict[int, Conv2d] = {}
        self.loc_head: dict[int, Conv2d] = {}
        for n in config.detection_scales:
            if config.use_objectness:
                self.obj_head[n] = Conv2d(f"head{n}.obj", r, 2 * a, 3, init, pad=1)
            self.cls_blocks[n] = (
                Inception(f"head{n}.cls.inception1", r, init),
                Inception(f"head{n}.cls.inception2", r, init),
            )
            self.cls_head[n] = Conv2d(f"head{n}.cls", r, k1 * a, 3, init, pad=1)
            self.loc_head[n] = Conv2d(f"head{n}.loc", r, 4 * a, 3, init, pad=1)

    def _layers(self) -> Iterator[Conv2d | Deconv2d | Inception]:
        yield from self.backbone.values()
        yield self.top
        for n in sorted(self.lateral):
            yield self.lateral[n]
            yield self.deconv[n]
        for n in self.config.detection_scales:
            if n in self.obj_head:
                yield self.obj_head[n]
            yield from self.cls_blocks[n]
            yield self.cls_head[n]
            yield self.loc_head[n]

    def named_parameters(self) -> dict[str, Tensor]:
        """Every trainable tensor, keyed by its dotted name, in build order."""
        return {
            param.name or "": param
            for layer in self._layers()
            for param in layer.parameters()
        }

    def backbone_forward(self, images: Tensor) -> dict[int, Tensor]:
        """Feature maps C4..C7 at strides 8, 16, 32, 64."""
        _, c, h, w = images.shape
        if c != IMAGE_CHANNELS or h != w or h % SIZE_MULTIPLE:
            msg = (
                f"Expected (N, 3, S, S) images with S a multiple of {SIZE_MULTIPLE}, "
                f"got {images.shape}"
            )
            raise DimensionError(msg)
        b = self.backbone
        x = maxpool2(relu(b["conv1"](images)))
        x = maxpool2(relu(b["conv2"](x)))
        x = maxpool2(relu(b["conv3"](x)))
        c4 = relu(b["conv4"](x))
        c5 = relu(b["conv5"](maxpool2(c4)))
        c6 = relu(b["conv6"](maxpool2(c5)))
        c7 = relu(b["conv7"](c6))
        return {4: c4, 5: c5, 6: c6, 7: c7}

    def reverse_connect(self, features: dict[int, Tensor]) -> dict[int, Tensor]:
        """rf-maps from layer 7 down to the lowest enabled scale."""
        rf = {TOP_LAYER: self.top(features[TOP_LAYER])}
        for n in sorted(self.lateral, reverse=True):
            upsampled = self.deconv[n](rf[n + 1])
            lateral = self.lateral[n](features[n])
            if upsampled.shape != lateral.shape:
                msg = (
                    f"rf-map {n}: upsampled {upsampled.shape} "
                    f"vs lateral {lateral.shape}"
                )
                raise DimensionError(msg)
            rf[n] = add(upsampled, lateral)
        return rf

    def heads_forward(self, rf: dict[int, Tensor]) -> ScaleOutputs:
        """Objectness, classification and regression maps per enabled scale."""
        outputs = []
        for n in self.config.detection_scales:
            first, second = self.cls_blocks[n]
            outputs.append(
                ScaleOutput(
                    layer=n,
                    obj_logits=self.obj_head[n](rf[n]) if n in self.obj_head else None,
                    cls_logits=self.cls_head[n](second(first(rf[n]))),
                    loc_preds=self.loc_head[n](rf[n]),
                ),
            )
        return ScaleOutputs(scales=tuple(outputs), num_classes=self.config.num_classes)

    def forward(self, images: Tensor) -> ScaleOutputs:
        """Full forward pass."""
        return self.heads_forward(self.reverse_connect(self.backbone_forward(images)))


def build(config: ModelConfig, rng_seed: int) -> TinyRON:
    """Build a TinyRON with N(0, init_std^2) weights and zero biases.

    Initialization is deterministic in rng_seed.
    """
    model = TinyRON(config, rng_seed)
    params = model.named_parameters()
    logger.info(
        "Built TinyRON: %d parameter tensors, %d weights, scales %s",
        len(params),
        sum(p.data.size for p in params.values()),
        config.detection_scales,
    )
    return model
