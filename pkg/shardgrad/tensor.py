"""Dense float64 linear algebra, activations and seeded random streams.

Every numeric carrier in shardgrad is a float64 ``numpy.ndarray``. ``DenseMatrix``
and ``Vector`` are aliases that document the expected rank; the ``as_*``
constructors validate rank, dtype and finiteness. Operations never mutate their
inputs.
"""
from __future__ import annotations

from typing import Literal

import numpy as np
import numpy.typing as npt

from shardgrad.errors import NumericError, RangeError, ShapeError

DenseMatrix = npt.NDArray[np.float64]
Vector = npt.NDArray[np.float64]

Activation = Literal["sigmoid", "tanh", "softmax", "identity"]
ACTIVATIONS: tuple[str, ...] = ("sigmoid", "tanh", "softmax", "identity")


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains non-finite values")


def as_vector(data, length: int | None = None) -> Vector:
    """Copy ``data`` into a finite 1-D float64 array, optionally checking its length."""
    arr = np.array(data, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise ShapeError(f"expected vector of length {length}, got {arr.shape[0]}")
    _check_finite(arr, "vector")
    return arr


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> DenseMatrix:
    """Copy ``data`` into a finite 2-D float64 array, optionally checking its shape."""
    arr = np.array(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise ShapeError(f"expected {cols} columns, got {arr.shape[1]}")
    _check_finite(arr, "matrix")
    return arr


def zeros(rows: int, cols: int) -> DenseMatrix:
    return np.zeros((rows, cols), dtype=np.float64)


def identity(n: int) -> DenseMatrix:
    return np.eye(n, dtype=np.float64)


def matmul(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    """Matrix product summed in ascending inner index, independent of the BLAS build.

    Raises ShapeError when inner dimensions differ. Layer kernels use ``@`` directly.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += np.outer(a[:, k], b[k])
    _check_finite(out, "matmul result")
    return out


# ── Activations ───────────────────────────────────────────────────────────────

def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        return sigmoid(x[None])[0]
    # Split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max-subtraction."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=-1, keepdims=True)


def activation_apply(kind: Activation, x: np.ndarray) -> np.ndarray:
    """Apply an activation; elementwise except softmax, which normalises the last axis."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x, f"{kind} input")
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "softmax":
        if x.shape[-1] < 1:
            raise ShapeError("softmax needs at least one element")
        return softmax(x)
    if kind == "identity":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}")


def activation_derivative(kind: Activation, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    """Elementwise derivative f'(pre), expressed through the activation output ``post``.

    Softmax has no elementwise derivative; use ``activation_backward`` instead.
    """
    if kind == "sigmoid":
        return post * (1.0 - post)
    if kind == "tanh":
        return 1.0 - post * post
    if kind == "identity":
        return np.ones_like(pre)
    raise ValueError(f"activation {kind!r} has no elementwise derivative")


def activation_backward(kind: Activation, pre: np.ndarray, post: np.ndarray,
                        grad_out: np.ndarray) -> np.ndarray:
    """Map dLoss/d(post) to dLoss/d(pre)."""
    if kind == "softmax":
        dot = np.sum(grad_out * post, axis=-1, keepdims=True)
        return post * (grad_out - dot)
    return grad_out * activation_derivative(kind, pre, post)


# ── Random streams ────────────────────────────────────────────────────────────

class Rng:
    """Seeded, splittable random stream (numpy PCG64 via SeedSequence).

    Identical seeds give identical sequences; ``spawn`` derives independent
    child streams deterministically.
    """

    def __init__(self, seed: int | np.random.SeedSequence) -> None:
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
            self.seed = int(seed.entropy) if isinstance(seed.entropy, int) else 0
        else:
            self.seed = int(seed)
            self._seq = np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def spawn(self, n: int) -> list[Rng]:
        return [Rng(child) for child in self._seq.spawn(n)]

    def uniform(self, lo: float, hi: float, count: int) -> Vector:
        return rng_uniform(self, lo, hi, count)

    def integers(self, lo: int, hi: int, size=None):
        return self._gen.integers(lo, hi, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def choice(self, n: int, p: np.ndarray) -> int:
        return int(self._gen.choice(n, p=p))


def rng_uniform(rng: Rng, lo: float, hi: float, count: int) -> Vector:
    """``count`` values in [lo, hi); advances the stream."""
    if not lo < hi:
        raise RangeError(f"empty range [{lo}, {hi})")
    values = rng.generator.uniform(lo, hi, size=count)
    # uniform() can round up to hi for tiny ranges
    return np.minimum(values, np.nextafter(hi, lo))
