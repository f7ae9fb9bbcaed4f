"""Parameters, gradients and Glorot-uniform initialisation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from shardgrad.errors import NumericError, ShapeError
from shardgrad.network.spec import (
    Conv2D, Dense, LstmCell, MeanPool, NetworkSpec, RnnCell, SoftmaxOutput,
)
from shardgrad.tensor import Rng, Vector


def param_shapes(spec: NetworkSpec) -> list[dict[str, tuple[int, ...]]]:
    """Named array shapes per layer; unweighted layers get an empty dict.

    LSTM weights are one (in + hidden, 4 * hidden) matrix whose column blocks
    are the input, forget, output and candidate gates, in that order.
    """
    shapes: list[dict[str, tuple[int, ...]]] = []
    for idx, layer in enumerate(spec.layers):
        in_shape = spec.shapes[idx]
        fan_in = math.prod(in_shape)
        if isinstance(layer, Dense):
            shapes.append({"W": (layer.in_dim, layer.out_dim), "b": (layer.out_dim,)})
        elif isinstance(layer, SoftmaxOutput):
            shapes.append({"W": (fan_in, layer.classes), "b": (layer.classes,)})
        elif isinstance(layer, Conv2D):
            shapes.append({
                "K": (layer.maps, in_shape[0], layer.kernel_h, layer.kernel_w),
                "b": (layer.maps,),
            })
        elif isinstance(layer, MeanPool):
            shapes.append({})
        elif isinstance(layer, RnnCell):
            shapes.append({"W": (fan_in + layer.hidden, layer.hidden), "b": (layer.hidden,)})
        elif isinstance(layer, LstmCell):
            shapes.append({"W": (fan_in + layer.hidden, 4 * layer.hidden), "b": (4 * layer.hidden,)})
    return shapes


def _glorot_limit(layer, shape: tuple[int, ...]) -> float:
    if isinstance(layer, Conv2D):
        maps, channels, kh, kw = shape
        return math.sqrt(6.0 / (channels * kh * kw + maps * kh * kw))
    return math.sqrt(6.0 / (shape[0] + shape[1]))


@dataclass
class Parameters:
    """Per-layer named float64 arrays (``W``/``K`` weights and ``b`` biases)."""

    layers: list[dict[str, np.ndarray]]

    def copy(self) -> Parameters:
        return Parameters([{k: v.copy() for k, v in layer.items()} for layer in self.layers])

    def zeros_like(self) -> Parameters:
        return Parameters([{k: np.zeros_like(v) for k, v in layer.items()} for layer in self.layers])

    def named(self) -> dict[str, np.ndarray]:
        """Flat name -> array view mapping, e.g. ``{"0.W": ..., "0.b": ...}``."""
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.items()}

    def items(self) -> Iterator[tuple[int, str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for k, v in layer.items():
                yield i, k, v

    @property
    def size(self) -> int:
        return sum(v.size for _, _, v in self.items())

    def flatten(self) -> Vector:
        parts = [v.ravel() for _, _, v in self.items()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def unflatten(self, flat: np.ndarray) -> Parameters:
        """New Parameters with this structure, filled from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ShapeError(f"flat vector has {flat.size} values, parameters need {self.size}")
        out: list[dict[str, np.ndarray]] = []
        offset = 0
        for layer in self.layers:
            filled = {}
            for k, v in layer.items():
                filled[k] = flat[offset:offset + v.size].reshape(v.shape).copy()
                offset += v.size
            out.append(filled)
        return Parameters(out)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for _, _, v in self.items())

    def same_structure(self, other: Parameters) -> bool:
        if len(self.layers) != len(other.layers):
            return False
        return all(
            a.keys() == b.keys() and all(a[k].shape == b[k].shape for k in a)
            for a, b in zip(self.layers, other.layers)
        )

    def equals(self, other: Parameters) -> bool:
        """Bit-exact equality."""
        return self.same_structure(other) and all(
            np.array_equal(a[k], b[k]) for a, b in zip(self.layers, other.layers) for k in a
        )


@dataclass
class Gradients(Parameters):
    """Parameter-shaped gradients plus the per-layer error vectors δ (dLoss/d pre-activation)."""

    deltas: list[np.ndarray | None] = field(default_factory=list)

    @classmethod
    def zeros_for(cls, params: Parameters) -> Gradients:
        return cls(params.zeros_like().layers, [None] * len(params.layers))

    def accumulate(self, other: Parameters) -> None:
        for mine, theirs in zip(self.layers, other.layers):
            for k in mine:
                mine[k] += theirs[k]

    def scaled(self, factor: float) -> Gradients:
        return Gradients(
            [{k: v * factor for k, v in layer.items()} for layer in self.layers],
            list(self.deltas),
        )

    def max_relative_error(self, other: Parameters) -> float:
        """Largest |a - b| / max(|b|_inf, tiny), taken per array (relative L-infinity)."""
        worst = 0.0
        for a_layer, b_layer in zip(self.layers, other.layers):
            for k in a_layer:
                ref = np.max(np.abs(b_layer[k])) if b_layer[k].size else 0.0
                diff = np.max(np.abs(a_layer[k] - b_layer[k])) if a_layer[k].size else 0.0
                worst = max(worst, diff / max(ref, 1e-300))
        return float(worst)


def validate_params(spec: NetworkSpec, params: Parameters) -> None:
    """Raise ShapeError/NumericError unless ``params`` fits ``spec`` and is finite."""
    expected = param_shapes(spec)
    if len(expected) != len(params.layers):
        raise ShapeError(f"spec has {len(expected)} layers, parameters have {len(params.layers)}")
    for idx, (want, have) in enumerate(zip(expected, params.layers)):
        if set(want) != set(have):
            raise ShapeError(f"layer {idx}: expected arrays {sorted(want)}, got {sorted(have)}")
        for name, shape in want.items():
            if have[name].shape != shape:
                raise ShapeError(f"layer {idx}.{name}: expected {shape}, got {have[name].shape}")
    if not params.is_finite():
        raise NumericError("parameters contain non-finite values")


def init_params(spec: NetworkSpec, rng: Rng) -> Parameters:
    """Glorot-uniform weights in [-r, r], r = sqrt(6 / (fan_in + fan_out)); zero biases."""
    layers: list[dict[str, np.ndarray]] = []
    for layer, shapes in zip(spec.layers, param_shapes(spec)):
        arrays: dict[str, np.ndarray] = {}
        for name, shape in shapes.items():
            if name == "b":
                arrays[name] = np.zeros(shape, dtype=np.float64)
            else:
                limit = _glorot_limit(layer, shape)
                arrays[name] = rng.generator.uniform(-limit, limit, size=shape)
        layers.append(arrays)
    return Parameters(layers)
