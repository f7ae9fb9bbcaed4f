"""Reference forward/backward passes for feedforward nets (single machine).

These are the oracle the distributed engines are checked against. Dense-only
nets accept a leading batch axis; per-example gradients are then summed.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from shardgrad.errors import ShapeError
from shardgrad.network.layers import kernel_for
from shardgrad.network.params import Gradients, Parameters
from shardgrad.network.spec import Conv2D, MeanPool, NetworkSpec
from shardgrad.tensor import Activation, activation_apply, activation_backward

logger = logging.getLogger(__name__)

LossKind = Literal["mse", "cross_entropy"]
LOG_FLOOR = 1e-300


@dataclass
class ForwardTrace:
    """Activations a^0..a^{n-1} and pre-activations in^1..in^{n-1}.

    ``activations[0]`` is the input; ``pre[j]`` and ``activations[j + 1]`` belong
    to layer j. Recurrent runs also fill ``steps`` with per-time-step caches.
    """

    activations: list[np.ndarray]
    pre: list[np.ndarray]
    steps: list = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


def _flatten_for(spec: NetworkSpec, idx: int, x: np.ndarray) -> np.ndarray:
    """Dense layers fed by multi-dimensional maps see a flat vector."""
    in_shape = spec.shapes[idx]
    if len(in_shape) > 1 and not isinstance(spec.layers[idx], (Conv2D, MeanPool)):
        return x.reshape(x.shape[:x.ndim - len(in_shape)] + (math.prod(in_shape),))
    return x


def check_input(spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1 and len(spec.input_shape) > 1 and x.size == math.prod(spec.input_shape):
        x = x.reshape(spec.input_shape)
    tail =x.shape[x.ndim - len(spec.input_shape):] if x.ndim >= len(spec.input_shape) else x.shape
    if tail != spec.input_shape:
        raise ShapeError(f"input shape {x.shape} does not end in {spec.input_shape}")
    if x.ndim > len(spec.input_shape) and not spec.is_dense_only:
        raise ShapeError("batched input is only supported for dense-only networks")
    return x


def forward(spec: NetworkSpec, params: Parameters, x: np.ndarray) -> ForwardTrace:
    """Run the feedforward stack; ``x`` has shape ``input_shape`` or (batch, b_0)."""
    if spec.is_recurrent:
        raise ShapeError("recurrent networks run through shardgrad.network.recurrent")
    x = check_input(spec, x)
    activations = [x]
    pre: list[np.ndarray] = []
    for idx, layer in enumerate(spec.layers):
        inp = _flatten_for(spec, idx, activations[-1])
        z = kernel_for(layer).pre_activation(layer, params.layers[idx], inp)
        pre.append(z)
        activations.append(activation_apply(spec.activation_of(idx), z))
    return ForwardTrace(activations=activations, pre=pre)


def loss(kind: LossKind, output: np.ndarray, target: np.ndarray) -> float:
    """MSE = ½Σ(o−t)²; cross-entropy = −Σ t·log(max(o, 1e-300)). Batches are summed."""
    output = np.asarray(output, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if output.shape != target.shape:
        raise ShapeError(f"output shape {output.shape} != target shape {target.shape}")
    if kind == "mse":
        diff = output - target
        return float(0.5 * np.sum(diff * diff))
    if kind == "cross_entropy":
        return float(-np.sum(target * np.log(np.maximum(output, LOG_FLOOR))))
    raise ValueError(f"unknown loss {kind!r}")


def output_delta(activation: Activation, loss_kind: LossKind, pre: np.ndarray,
                 post: np.ndarray, target: np.ndarray) -> np.ndarray:
    """δ at the output layer: dLoss/d(in^{n-1})."""
    if loss_kind == "cross_entropy" and activation == "softmax":
        return post * np.sum(target, axis=-1, keepdims=True) - target
    if loss_kind == "mse":
        grad_out = post - target
    elif loss_kind == "cross_entropy":
        grad_out = -target / np.maximum(post, LOG_FLOOR)
    else:
        raise ValueError(f"unknown loss {loss_kind!r}")
    return activation_backward(activation, pre, post, grad_out)


def backward(spec: NetworkSpec, params: Parameters, trace: ForwardTrace, target: np.ndarray,
             loss_kind: LossKind = "cross_entropy") -> tuple[Gradients, float]:
    """Gradients of the loss w.r.t. every parameter, with δ^j recorded per layer."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != trace.output.shape:
        raise ShapeError(f"target shape {target.shape} != output shape {trace.output.shape}")
    value = loss(loss_kind, trace.output, target)

    last = len(spec.layers) - 1
    grads: list[dict[str, np.ndarray]] = [dict() for _ in spec.layers]
    deltas: list[np.ndarray | None] = [None] * len(spec.layers)
    delta = output_delta(spec.activation_of(last), loss_kind, trace.pre[last], trace.output, target)
    for idx in range(last, -1, -1):
        layer = spec.layers[idx]
        deltas[idx] = delta
        inp = _flatten_for(spec, idx, trace.activations[idx])
        grads[idx], grad_x = kernel_for(layer).backward(layer, params.layers[idx], inp, delta)
        if idx == 0:
            break
        grad_x = grad_x.reshape(trace.activations[idx].shape)
        below = idx - 1
        delta = activation_backward(spec.activation_of(below), trace.pre[below],
                                    trace.activations[idx], grad_x)
    return Gradients(grads, deltas), value


def predict(spec: NetworkSpec, params: Parameters, x: np.ndarray) -> np.ndarray:
    """Output activations for ``x`` (single example or dense batch)."""
    return forward(spec, params, x).output
