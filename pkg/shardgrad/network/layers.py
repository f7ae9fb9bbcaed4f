"""Per-layer kernels for the feedforward layer kinds.

A kernel maps the layer input to its pre-activation and, given the error
δ = dLoss/d(pre), returns the parameter gradients and dLoss/d(input).
Activations are applied by the passes, not the kernels.
"""
from __future__ import annotations

import logging
from abc import ABC, abstractmethod

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from shardgrad.errors import ShapeError
from shardgrad.network.spec import Conv2D, Dense, LayerSpec, MeanPool, SoftmaxOutput

logger = logging.getLogger(__name__)

ArrayDict = dict[str, np.ndarray]


# ── Dense helpers (shared with the model-parallel workers) ────────────────────

def dense_pre(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ W + b


def dense_weight_grad(x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """dLoss/dW; a leading batch axis is summed."""
    if x.ndim == 1:
        return np.outer(x, delta)
    return x.T @ delta


def dense_bias_grad(delta: np.ndarray) -> np.ndarray:
    return delta.copy() if delta.ndim == 1 else delta.sum(axis=0)


def dense_input_grad(W: np.ndarray, delta: np.ndarray) -> np.ndarray:
    return delta @ W.T


# ── Kernels ───────────────────────────────────────────────────────────────────

class LayerKernel(ABC):
    """Forward/backward arithmetic for one layer kind."""

    @abstractmethod
    def pre_activation(self, layer: LayerSpec, p: ArrayDict, x: np.ndarray) -> np.ndarray:
        """Return in^j for input ``x``."""
        ...

    @abstractmethod
    def backward(self, layer: LayerSpec, p: ArrayDict, x: np.ndarray,
                 delta: np.ndarray) -> tuple[ArrayDict, np.ndarray]:
        """Return (parameter gradients, dLoss/dx) for error ``delta`` at this layer."""
        ...


class DenseKernel(LayerKernel):
    """Dense and softmax-output layers; accepts an optional leading batch axis."""

    def pre_activation(self, layer, p, x):
        if x.shape[-1] != p["W"].shape[0]:
            raise ShapeError(f"dense layer expects {p['W'].shape[0]} inputs, got {x.shape[-1]}")
        return dense_pre(x, p["W"], p["b"])

    def backward(self, layer, p, x, delta):
        grads = {"W": dense_weight_grad(x, delta), "b": dense_bias_grad(delta)}
        return grads, dense_input_grad(p["W"], delta)


class ConvKernel(LayerKernel):
    """Valid convolution (cross-correlation) over one (channels, h, w) example."""

    def pre_activation(self, layer, p, x):
        K = p["K"]
        if x.ndim != 3 or x.shape[0] != K.shape[1]:
            raise ShapeError(f"conv layer expects ({K.shape[1]}, h, w) input, got {x.shape}")
        windows = sliding_window_view(x, K.shape[2:], axis=(1, 2))
        return np.einsum("chwij,mcij->mhw", windows, K) + p["b"][:, None, None]

    def backward(self, layer, p, x, delta):
        K = p["K"]
        kh, kw = K.shape[2:]
        windows = sliding_window_view(x, (kh, kw), axis=(1, 2))
        grad_K = np.einsum("chwij,mhw->mcij", windows, delta)
        grad_b = delta.sum(axis=(1, 2))
        # full correlation of the padded error with the flipped kernel
        padded = np.pad(delta, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        err_windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))
        grad_x = np.einsum("mhwij,mcij->chw", err_windows, K[:, :, ::-1, ::-1])
        return {"K": grad_K, "b": grad_b}, grad_x


class MeanPoolKernel(LayerKernel):
    """Non-overlapping mean pooling; backward spreads δ uniformly over each window."""

    def pre_activation(self, layer, p, x):
        c, h, w = x.shape
        return x.reshape(c, h // layer.h, layer.h, w // layer.w, layer.w).mean(axis=(2, 4))

    def backward(self, layer, p, x, delta):
        spread = delta / (layer.h * layer.w)
        grad_x = np.repeat(np.repeat(spread, layer.h, axis=1), layer.w, axis=2)
        return {}, grad_x


_KERNELS: dict[type, LayerKernel] = {
    Dense: DenseKernel(),
    SoftmaxOutput: DenseKernel(),
    Conv2D: ConvKernel(),
    MeanPool: MeanPoolKernel(),
}


def kernel_for(layer: LayerSpec) -> LayerKernel:
    try:
        return _KERNELS[type(layer)]
    except KeyError:
        raise ShapeError(f"no feedforward kernel for {type(layer).__name__}") from None
