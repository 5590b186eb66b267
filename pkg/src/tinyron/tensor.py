"""Rank-4 tensors with reverse-mode automatic differentiation.

Operations executed inside an active :class:`Graph` are recorded in execution
order; :func:`backward` replays them in reverse and accumulates gradients into
every tensor that requires them. Outside a graph the same functions are plain
numpy computations, which is how inference runs.
"""

import logging
from collections.abc import Callable, Mapping
from contextvars import ContextVar, Token
from dataclasses import dataclass
from types import TracebackType
from typing import NamedTuple, Self

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import ArrayLike, NDArray

from tinyron.domain.enums import Precision
from tinyron.domain.errors import (
    ConfigurationError,
    DimensionError,
    NumericError,
    UnsupportedConfigurationError,
)

logger = logging.getLogger(__name__)

type Array = NDArray[np.floating]
type BackwardFn = Callable[[Array], tuple[Array | None, ...]]

LOG_CLAMP = 1e-12
RANK = 4


class Tensor:
    """An (N, C, H, W) array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "name", "requires_grad")

    def __init__(
        self,
        data: ArrayLike,
        *,
        requires_grad: bool = False,
        name: str | None = None,
        precision: Precision | None = None,
    ) -> None:
        """Wrap data, casting to the requested precision (default: keep float width)."""
        array = np.asarray(data)
        if precision is None:
            wide = array.dtype == np.float64
            precision = Precision.VERIFICATION if wide else Precision.STANDARD
        array = np.ascontiguousarray(array, dtype=np.dtype(precision.value))
        if array.ndim != RANK:
            msg = f"Tensor must be rank 4 (N, C, H, W), got shape {array.shape}"
            raise DimensionError(msg)
        _require_finite(array, name or "tensor")
        self.data: Array = array
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def scalar(cls, value: float, precision: Precision = Precision.STANDARD) -> Self:
        """Return a (1, 1, 1, 1) tensor holding value."""
        return cls(np.full((1, 1, 1, 1), value), precision=precision)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        """(N, C, H, W) extents."""
        n, c, h, w = self.data.shape
        return (n, c, h, w)

    @property
    def precision(self) -> Precision:
        """Precision mode inferred from the data type."""
        if self.data.dtype == np.float64:
            return Precision.VERIFICATION
        return Precision.STANDARD

    def item(self) -> float:
        """Return the single value of a scalar tensor."""
        if self.data.size != 1:
            msg = f"item() needs a single-element tensor, got shape {self.shape}"
            raise DimensionError(msg)
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        """Drop the gradient buffer."""
        self.grad = None

    def __repr__(self) -> str:
        """Show name, shape and precision, not the data."""
        label = f"{self.name} " if self.name else ""
        return f"Tensor({label}shape={self.shape}, {self.precision.value})"


@dataclass(slots=True, frozen=True)
class Node:
    """One executed operation: its inputs, its output and its local chain rule."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


_ACTIVE_GRAPH: ContextVar["Graph | None"] = ContextVar("tinyron_graph", default=None)


class Graph:
    """Tape of operations recorded while the graph is the active context."""

    def __init__(self) -> None:
        """Start with an empty tape."""
        self.nodes: list[Node] = []
        self._token: Token[Graph | None] | None = None

    def __enter__(self) -> Self:
        """Make this graph the recording target of the current context."""
        self._token = _ACTIVE_GRAPH.set(self)
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        tb: TracebackType | None,
    ) -> None:
        """Stop recording; the tape stays available for backward()."""
        if self._token is not None:
            _ACTIVE_GRAPH.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        """Number of recorded operations."""
        return len(self.nodes)


def _require_finite(array: Array, what: str) -> None:
    if not np.isfinite(array).all():
        msg = f"Non-finite values in {what}"
        raise NumericError(msg)


def _same_precision(*tensors: Tensor) -> Precision:
    precisions = {tensor.precision for tensor in tensors}
    if len(precisions) != 1:
        msg = f"Mixed precisions in one operation: {sorted(precisions)}"
        raise ConfigurationError(msg)
    return precisions.pop()


def _emit(
    op: str,
    inputs: tuple[Tensor, ...],
    data: Array,
    backward: BackwardFn,
) -> Tensor:
    out = Tensor(data, precision=_same_precision(*inputs), name=op)
    graph = _ACTIVE_GRAPH.get()
    if graph is not None and any(tensor.requires_grad for tensor in inputs):
        out.requires_grad = True
        graph.nodes.append(Node(op, inputs, out, backward))
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    *,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """Cross-correlate x (N, Cin, H, W) with weight (Cout, Cin, k, k), plus bias."""
    N, C, H, W = x.shape
    c_out, c_in, kh, kw = weight.shape
    if C != c_in or kh != kw:
        msg = f"conv2d: input {x.shape} does not fit weight {weight.shape}"
        raise DimensionError(msg)
    if bias is not None and bias.shape != (1, c_out, 1, 1):
        msg = f"conv2d: bias must have shape (1, {c_out}, 1, 1), got {bias.shape}"
        raise DimensionError(msg)
    if stride < 1 or pad < 0:
        msg = f"conv2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}"
        raise ConfigurationError(msg)
    k = kh
    span_h, span_w = H + 2 * pad - k, W + 2 * pad - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        msg = (
            f"conv2d: extent {H}x{W} with k={k}, stride={stride}, pad={pad} "
            "is not integral"
        )
        raise ConfigurationError(msg)
    h_out, w_out = span_h // stride + 1, span_w // stride + 1

    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # (N, C, h_out, w_out, k, k) view over the padded input
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data

    def _backward(grad: Array) -> tuple[Array | None, ...]:
        grad_w = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                grad_padded[
                    :,
                    :,
                    i : i + stride * h_out : stride,
                    j : j + stride * w_out : stride,
                ] += np.einsum("nohw,oc->nchw", grad, weight.data[:, :, i, j])
        grad_x = grad_padded[:, :, pad : pad + H, pad : pad + W]
        grad_b = grad.sum(axis=(0, 2, 3), keepdims=True) if bias is not None else None
        return (grad_x, grad_w, grad_b)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", inputs, out, _backward)


def deconv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    *,
    stride: int = 2,
) -> Tensor:
    """Transposed convolution, weight (Cin, Cout, 2, 2), exact 2x upsampling."""
    N, C, H, W = x.shape
    c_in, c_out, kh, kw = weight.shape
    if stride != 2 or kh != 2 or kw != 2:  # noqa: PLR2004 - the only supported kernel
        msg = (
            "deconv2d supports kernel 2 with stride 2 only, "
            f"got k={kh}x{kw}, s={stride}"
        )
        raise UnsupportedConfigurationError(msg)
    if C != c_in:
        msg = f"deconv2d: input {x.shape} does not fit weight {weight.shape}"
        raise DimensionError(msg)
    if bias is not None and bias.shape != (1, c_out, 1, 1):
        msg = f"deconv2d: bias must have shape (1, {c_out}, 1, 1), got {bias.shape}"
        raise DimensionError(msg)

    # (N, H, W, Cout, 2, 2) -> (N, Cout, H, 2, W, 2) -> (N, Cout, 2H, 2W)
    spread = np.tensordot(x.data, weight.data, axes=([1], [0]))
    out = spread.transpose(0, 3, 1, 4, 2, 5).reshape(N, c_out, 2 * H, 2 * W)
    if bias is not None:
        out = out + bias.data

    def _backward(grad: Array) -> tuple[Array | None, ...]:
        blocks = grad.reshape(N, c_out, H, 2, W, 2)
        grad_x = np.einsum("nchiwj,dcij->ndhw", blocks, weight.data, optimize=True)
        grad_w = np.einsum("ndhw,nchiwj->dcij", x.data, blocks, optimize=True)
        grad_b = grad.sum(axis=(0, 2, 3), keepdims=True) if bias is not None else None
        return (grad_x, grad_w, grad_b)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("deconv2d", inputs, out, _backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first row-major position."""
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        msg = f"maxpool2 needs even extents, got {H}x{W}"
        raise DimensionError(msg)
    windows = (
        x.data.reshape(N, C, H // 2, 2, W // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(N, C, H // 2, W // 2, 4)
    )
    winner = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, winner[..., None], axis=-1)[..., 0]

    def _backward(grad: Array) -> tuple[Array | None, ...]:
        routed = np.zeros_like(windows)
        np.put_along_axis(routed, winner[..., None], grad[..., None], axis=-1)
        grad_x = (
            routed.reshape(N, C, H // 2, W // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(N, C, H, W)
        )
        return (grad_x,)

    return _emit("maxpool2", (x,), out, _backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0)."""
    active = x.data > 0
    out = np.where(active, x.data, 0.0)

    def _backward(grad: Array) -> tuple[Array | None, ...]:
        return (grad * active,)

    return _emit("relu", (x,), out, _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        msg = f"add: shapes {a.shape} and {b.shape} differ"
        raise DimensionError(msg)

    def _backward(grad: Array) -> tuple[Array | None, ...]:
        return (grad, grad)

    return _emit("add", (a, b), a.data + b.data, _backward)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply every element by a constant."""

    def _backward(grad: Array) -> tuple[Array | None, ...]:
        return (grad * factor,)

    return _emit("scale", (x,), x.data * factor, _backward)


def concat_channels(*parts: Tensor) -> Tensor:
    """Concatenate tensors with equal N, H, W along the channel axis."""
    if not parts:
        msg = "concat_channels needs at least one tensor"
        raise DimensionError(msg)
    n, _, h, w = parts[0].shape
    if any((p.shape[0], p.shape[2], p.shape[3]) != (n, h, w) for p in parts):
        msg = f"concat_channels: shapes {[p.shape for p in parts]} differ outside C"
        raise DimensionError(msg)
    bounds = np.cumsum([p.shape[1] for p in parts])[:-1]

    def _backward(grad: Array) -> tuple[Array | None, ...]:
        return tuple(np.split(grad, bounds, axis=1))

    data = np.concatenate([p.data for p in parts], axis=1)
    return _emit("concat", parts, data, _backward)


def softmax_groups(x: Tensor, group: int) -> Tensor:
    """Softmax over each contiguous block of `group` channels, per location."""
    N, C, H, W = x.shape
    if group < 1 or C % group:
        msg = f"softmax_groups: {C} channels are not divisible into groups of {group}"
        raise DimensionError(msg)
    logits = x.data.reshape(N, C // group, group, H, W)
    shifted = np.exp(logits - logits.max(axis=2, keepdims=True))
    probs = shifted / shifted.sum(axis=2, keepdims=True)

    def _backward(grad: Array) -> tuple[Array | None, ...]:
        g = grad.reshape(probs.shape)
        inner = (g * probs).sum(axis=2, keepdims=True)
        return ((probs * (g - inner)).reshape(N, C, H, W),)

    return _emit("softmax_groups", (x,), probs.reshape(N, C, H, W), _backward)


class Sites(NamedTuple):
    """Per-anchor locations in a head output: batch index, box index a, row, column."""

    batch: NDArray[np.intp]
    box: NDArray[np.intp]
    y: NDArray[np.intp]
    x: NDArray[np.intp]

    @property
    def count(self) -> int:
        """Number of sites."""
        return int(self.batch.shape[0])

    @classmethod
    def empty(cls) -> Self:
        """No sites."""
        none = np.zeros(0, dtype=np.intp)
        return cls(none, none, none, none)


def cross_entropy(
    probs: Tensor,
    group: int,
    sites: Sites,
    targets: NDArray[np.intp],
) -> Tensor:
    """Sum of -log p_target over sites; probs holds `group`-way distributions per box.

    p_target is clamped below at 1e-12 before the log.
    """
    N, C, H, W = probs.shape
    if C % group:
        msg = f"cross_entropy: {C} channels are not divisible into groups of {group}"
        raise DimensionError(msg)
    if len(targets) != sites.count:
        msg = f"cross_entropy: {len(targets)} targets for {sites.count} sites"
        raise DimensionError(msg)
    if len(targets) and (targets.min() < 0 or targets.max() >= group):
        msg = f"cross_entropy: target index outside [0, {group})"
        raise DimensionError(msg)
    index = (sites.batch, sites.box * group + targets, sites.y, sites.x)
    picked = probs.data[index]
    clamped = np.maximum(picked, LOG_CLAMP)
    total = -np.log(clamped).sum()

    def _backward(grad: Array) -> tuple[Array | None, ...]:
        local = np.where(picked > LOG_CLAMP, -1.0 / clamped, 0.0) * grad.reshape(())
        grad_probs = np.zeros_like(probs.data)
        np.add.at(grad_probs, index, local)
        return (grad_probs,)

    return _emit("cross_entropy", (probs,), np.full((1, 1, 1, 1), total), _backward)


def smooth_l1(pred: Tensor, sites: Sites, targets: Array) -> Tensor:
    """Sum over sites and the four offsets of 0.5x^2 if |x| < 1 else |x| - 0.5."""
    if targets.shape != (sites.count, 4):
        msg = (
            f"smooth_l1: targets must have shape ({sites.count}, 4), "
            f"got {targets.shape}"
        )
        raise DimensionError(msg)
    channels = sites.box[:, None] * 4 + np.arange(4)
    index = (sites.batch[:, None], channels, sites.y[:, None], sites.x[:, None])
    diff = pred.data[index] - targets
    small = np.abs(diff) < 1.0
    total = np.where(small, 0.5 * diff**2, np.abs(diff) - 0.5).sum()

    def _backward(grad: Array) -> tuple[Array | None, ...]:
        local = np.where(small, diff, np.sign(diff)) * grad.reshape(())
        grad_pred = np.zeros_like(pred.data)
        np.add.at(grad_pred, index, local)
        return (grad_pred,)

    return _emit("smooth_l1", (pred,), np.full((1, 1, 1, 1), total), _backward)


def weighted_sum(x: Tensor, weights: ArrayLike) -> Tensor:
    """Inner product of x with a fixed same-shape array, as a scalar tensor."""
    fixed = np.asarray(weights, dtype=x.data.dtype)
    if fixed.shape != x.shape:
        msg = f"weighted_sum: weights {fixed.shape} do not match {x.shape}"
        raise DimensionError(msg)

    def _backward(grad: Array) -> tuple[Array | None, ...]:
        return (fixed * grad.reshape(()),)

    total = np.full((1, 1, 1, 1), (x.data * fixed).sum())
    return _emit("weighted_sum", (x,), total, _backward)


def backward(graph: Graph, loss: Tensor) -> None:
    """Populate .grad of every tensor reachable from loss, in reverse tape order.

    Gradients accumulate, so a parameter reached by several paths (or several
    backward calls without zero_grad) receives their sum.
    """
    if loss.shape != (1, 1, 1, 1):
        msg = f"backward needs a scalar loss, got shape {loss.shape}"
        raise DimensionError(msg)
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for node in reversed(graph.nodes):
        if node.output.grad is None:
            continue
        grads = node.backward(node.output.grad)
        for tensor, grad in zip(node.inputs, grads, strict=True):
            if grad is None or not tensor.requires_grad:
                continue
            _require_finite(grad, f"gradient of {node.op} input {tensor!r}")
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def sgd_update(
    param: Array,
    grad: Array,
    velocity: Array,
    *,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """In place: v <- momentum*v + grad + weight_decay*param; param <- param - lr*v."""
    velocity *= momentum
    velocity += grad + weight_decay * param
    param -= lr * velocity


class SGD:
    """Momentum SGD with L2 weight decay over a named parameter set."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        *,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
    ) -> None:
        """Allocate one zero velocity buffer per parameter."""
        self.params = dict(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        """Clear every parameter gradient."""
        for param in self.params.values():
            param.zero_grad()

    def step(self, lr: float) -> None:
        """Apply one update; a parameter without a gradient is treated as zero-grad.

        Raises NumericError, naming every offending parameter, when any gradient
        is non-finite; no parameter is touched in that case.
        """
        bad = [
            name
            for name, param in self.params.items()
            if param.grad is not None and not np.isfinite(param.grad).all()
        ]
        if bad:
            msg = f"Non-finite gradients in {len(bad)} parameters: {', '.join(bad)}"
            raise NumericError(msg)
        for name, param in self.params.items():
            grad = param.grad if param.grad is not None else np.zeros_like(param.data)
            sgd_update(
                param.data,
                grad,
                self.velocity[name],
                lr=lr,
                momentum=self.momentum,
                weight_decay=self.weight_decay,
            )
