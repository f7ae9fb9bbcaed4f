"""Architecture descriptions: layer specs, network specs and the standard builders."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

from shardgrad.errors import ShapeError
from shardgrad.tensor import ACTIVATIONS, Activation


@dataclass(frozen=True)
class Dense:
    """Fully connected layer: out = act(x @ W + b)."""

    in_dim: int
    out_dim: int
    activation: Activation = "sigmoid"


@dataclass(frozen=True)
class Conv2D:
    """Valid 2-D convolution over (channels, height, width) inputs."""

    kernel_h: int
    kernel_w: int
    maps: int
    activation: Activation = "sigmoid"


@dataclass(frozen=True)
class MeanPool:
    """Non-overlapping mean pooling; input height/width must divide evenly."""

    h: int
    w: int
    activation: Activation = field(default="identity", init=False)


@dataclass(frozen=True)
class SoftmaxOutput:
    """Dense output layer with softmax; fan-in is taken from the previous layer."""

    classes: int
    activation: Activation = field(default="softmax", init=False)


@dataclass(frozen=True)
class RnnCell:
    """Elman cell: h_t = tanh([x_t, h_{t-1}] @ W + b)."""

    hidden: int


@dataclass(frozen=True)
class LstmCell:
    """LSTM cell with input, forget, output and candidate gates; no peepholes."""

    hidden: int


LayerSpec = Union[Dense, Conv2D, MeanPool, SoftmaxOutput, RnnCell, LstmCell]
RECURRENT_TYPES = (RnnCell, LstmCell)


def _counts_positive(layer: LayerSpec) -> None:
    for name, value in vars(layer).items():
        if isinstance(value, int) and value < 1:
            raise ShapeError(f"{type(layer).__name__}.{name} must be >= 1, got {value}")
    activation = getattr(layer, "activation", None)
    if activation is not None and activation not in ACTIVATIONS:
        raise ShapeError(f"unknown activation {activation!r}")


@dataclass(frozen=True)
class NetworkSpec:
    """An ordered layer stack plus the input shape.

    ``n`` counts neuron layers including the input, so a 784-480-160-10 net has
    n = 4 and ``b == (784, 480, 160, 10)``. ``shapes[j]`` is the output shape
    of layer j-1 (``shapes[0]`` is the input shape).
    """

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if not self.layers:
            raise ShapeError("a network needs at least one layer (n >= 2)")
        object.__setattr__(self, "shapes", tuple(self._infer_shapes()))

    def _infer_shapes(self) -> list[tuple[int, ...]]:
        shapes = [self.input_shape]
        seen_feedforward = False
        for idx, layer in enumerate(self.layers):
            _counts_positive(layer)
            prev = shapes[-1]
            size = math.prod(prev)
            if isinstance(layer, RECURRENT_TYPES):
                if seen_feedforward:
                    raise ShapeError(f"layer {idx}: recurrent cells must precede feedforward layers")
                if len(prev) != 1:
                    raise ShapeError(f"layer {idx}: recurrent cell needs a flat input, got {prev}")
                shapes.append((layer.hidden,))
                continue
            seen_feedforward = True
            if isinstance(layer, Dense):
                if layer.in_dim != size:
                    raise ShapeError(f"layer {idx}: Dense expects {layer.in_dim} inputs, previous layer has {size}")
                shapes.append((layer.out_dim,))
            elif isinstance(layer, SoftmaxOutput):
                shapes.append((layer.classes,))
            elif isinstance(layer, Conv2D):
                if len(prev) != 3:
                    raise ShapeError(f"layer {idx}: Conv2D needs (channels, h, w) input, got {prev}")
                c, h, w = prev
                if layer.kernel_h > h or layer.kernel_w > w:
                    raise ShapeError(f"layer {idx}: kernel larger than input {prev}")
                shapes.append((layer.maps, h - layer.kernel_h + 1, w - layer.kernel_w + 1))
            elif isinstance(layer, MeanPool):
                if len(prev) != 3:
                    raise ShapeError(f"layer {idx}: MeanPool needs (channels, h, w) input, got {prev}")
                c, h, w = prev
                if h % layer.h or w % layer.w:
                    raise ShapeError(f"layer {idx}: pool {layer.h}x{layer.w} does not divide {h}x{w}")
                shapes.append((c, h // layer.h, w // layer.w))
            else:
                raise ShapeError(f"layer {idx}: unsupported layer {layer!r}")
        return shapes

    @property
    def n(self) -> int:
        return len(self.layers) + 1

    @property
    def b(self) -> tuple[int, ...]:
        return tuple(math.prod(s) for s in self.shapes)

    @property
    def is_recurrent(self) -> bool:
        return any(isinstance(layer, RECURRENT_TYPES) for layer in self.layers)

    @property
    def recurrent_depth(self) -> int:
        return sum(isinstance(layer, RECURRENT_TYPES) for layer in self.layers)

    @property
    def is_dense_only(self) -> bool:
        return all(isinstance(layer, (Dense, SoftmaxOutput)) for layer in self.layers)

    @property
    def output_size(self) -> int:
        return self.b[-1]

    def activation_of(self, index: int) -> Activation:
        layer = self.layers[index]
        if isinstance(layer, RnnCell):
            return "tanh"
        if isinstance(layer, LstmCell):
            return "identity"
        return layer.activation


# ── Builders ──────────────────────────────────────────────────────────────────

def fc_spec(sizes: list[int] | tuple[int, ...], hidden: Activation = "sigmoid",
            output: Activation = "softmax") -> NetworkSpec:
    """Fully connected net, e.g. ``fc_spec([784, 480, 160, 10])``."""
    if len(sizes) < 2:
        raise ShapeError("an FC net needs at least input and output sizes")
    layers = [
        Dense(sizes[i], sizes[i + 1], hidden if i < len(sizes) - 2 else output)
        for i in range(len(sizes) - 1)
    ]
    return NetworkSpec(layers=tuple(layers), input_shape=(sizes[0],))


def cnn_spec(input_shape: tuple[int, int, int] = (1, 28, 28), classes: int = 10) -> NetworkSpec:
    """conv 5x5/6 -> pool 2x2 -> conv 5x5/12 -> pool 2x2 -> conv 4x4/12 -> softmax."""
    layers = (
        Conv2D(5, 5, 6),
        MeanPool(2, 2),
        Conv2D(5, 5, 12),
        MeanPool(2, 2),
        Conv2D(4, 4, 12),
        SoftmaxOutput(classes),
    )
    return NetworkSpec(layers=layers, input_shape=input_shape)


def rnn_spec(vocab: int, hidden_sizes: list[int] | tuple[int, ...] = (200, 100)) -> NetworkSpec:
    layers = tuple(RnnCell(h) for h in hidden_sizes) + (SoftmaxOutput(vocab),)
    return NetworkSpec(layers=layers, input_shape=(vocab,))


def lstm_spec(vocab: int, hidden_sizes: list[int] | tuple[int, ...] = (200, 100)) -> NetworkSpec:
    layers = tuple(LstmCell(h) for h in hidden_sizes) + (SoftmaxOutput(vocab),)
    return NetworkSpec(layers=layers, input_shape=(vocab,))
