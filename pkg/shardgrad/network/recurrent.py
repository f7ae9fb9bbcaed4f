"""Recurrent stacks (Elman RNN and LSTM cells) with truncated BPTT and sampling.

A recurrent NetworkSpec is a stack of cells followed by a per-step
feedforward head (normally one SoftmaxOutput). Masked steps are skipped:
every cell state passes through unchanged and the step contributes exactly
zero loss and zero gradient.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from shardgrad.errors import RangeError, ShapeError
from shardgrad.network.layers import kernel_for
from shardgrad.network.params import Gradients, Parameters, validate_params
from shardgrad.network.passes import LossKind, loss, output_delta
from shardgrad.network.spec import LstmCell, NetworkSpec, RnnCell
from shardgrad.tensor import Rng, activation_apply, activation_backward, sigmoid

logger = logging.getLogger(__name__)

DEFAULT_TRUNCATION = 25


@dataclass
class CellState:
    h: np.ndarray
    c: np.ndarray | None = None


@dataclass
class CellCache:
    """Everything one cell step needs for its backward pass."""

    concat: np.ndarray
    h: np.ndarray
    c_prev: np.ndarray | None = None
    gates: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = None
    tanh_c: np.ndarray | None = None


@dataclass
class StepCache:
    cells: list[CellCache]
    head_inputs: list[np.ndarray]
    head_pre: list[np.ndarray]
    output: np.ndarray


def zero_state(spec: NetworkSpec) -> list[CellState]:
    states = []
    for layer in spec.layers[:spec.recurrent_depth]:
        c = np.zeros(layer.hidden) if isinstance(layer, LstmCell) else None
        states.append(CellState(np.zeros(layer.hidden), c))
    return states


def _require_recurrent(spec: NetworkSpec) -> None:
    if not spec.is_recurrent:
        raise ShapeError("expected a network with recurrent cells")


def _cell_forward(layer, p, x: np.ndarray, state: CellState) -> tuple[CellState, CellCache]:
    concat = np.concatenate([x, state.h])
    z = concat @ p["W"] + p["b"]
    if isinstance(layer, RnnCell):
        h = np.tanh(z)
        return CellState(h), CellCache(concat=concat, h=h)
    H = layer.hidden
    i = sigmoid(z[:H])
    f = sigmoid(z[H:2 * H])
    o = sigmoid(z[2 * H:3 * H])
    g = np.tanh(z[3 * H:])
    c = f * state.c + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    cache = CellCache(concat=concat, h=h, c_prev=state.c, gates=(i, f, o, g), tanh_c=tanh_c)
    return CellState(h, c), cache


def _cell_backward(layer, p, cache: CellCache, dh: np.ndarray, dc: np.ndarray | None,
                   grads: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray | None, np.ndarray]:
    """Accumulate into ``grads``; return (dx, dh_prev, dc_prev, dz)."""
    if isinstance(layer, RnnCell):
        dz = dh * (1.0 - cache.h * cache.h)
        dc_prev = None
    else:
        i, f, o, g = cache.gates
        dc_total = dc + dh * o * (1.0 - cache.tanh_c * cache.tanh_c)
        dz = np.concatenate([
            dc_total * g * i * (1.0 - i),
            dc_total * cache.c_prev * f * (1.0 - f),
            dh * cache.tanh_c * o * (1.0 - o),
            dc_total * i * (1.0 - g * g),
        ])
        dc_prev = dc_total * f
    grads["W"] += np.outer(cache.concat, dz)
    grads["b"] += dz
    dconcat = dz @ p["W"].T
    n_in = p["W"].shape[0] - dh.shape[0]
    return dconcat[:n_in], dconcat[n_in:], dc_prev, dz


def step(spec: NetworkSpec, params: Parameters, x: np.ndarray,
         states: list[CellState]) -> tuple[list[CellState], StepCache]:
    """Advance every cell by one step and run the head on the top hidden state."""
    depth = spec.recurrent_depth
    new_states: list[CellState] = []
    caches: list[CellCache] = []
    inp = x
    for l in range(depth):
        state, cache = _cell_forward(spec.layers[l], params.layers[l], inp, states[l])
        new_states.append(state)
        caches.append(cache)
        inp = state.h
    head_inputs, head_pre = [], []
    for idx in range(depth, len(spec.layers)):
        layer = spec.layers[idx]
        head_inputs.append(inp)
        z = kernel_for(layer).pre_activation(layer, params.layers[idx], inp)
        head_pre.append(z)
        inp = activation_apply(spec.activation_of(idx), z)
    return new_states, StepCache(caches, head_inputs, head_pre, inp)


def _check_sequence(spec: NetworkSpec, sequence, targets, mask) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    seq = np.asarray(sequence, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64)
    msk = np.ones(len(seq)) if mask is None else np.asarray(mask, dtype=np.float64)
    if not (len(seq) == len(tgt) == len(msk)):
        raise ShapeError(f"sequence, targets and mask lengths differ: {len(seq)}, {len(tgt)}, {len(msk)}")
    if len(seq) and seq.shape[1:] != spec.input_shape:
        raise ShapeError(f"sequence steps have shape {seq.shape[1:]}, expected {spec.input_shape}")
    if len(tgt) and tgt.shape[1:] != (spec.output_size,):
        raise ShapeError(f"targets have shape {tgt.shape[1:]}, expected ({spec.output_size},)")
    if not np.all((msk == 0) | (msk == 1)):
        raise ShapeError("mask values must be 0 or 1")
    return seq, tgt, msk


def run_sequence(spec: NetworkSpec, params: Parameters, sequence, mask=None,
                 states: list[CellState] | None = None) -> tuple[list[np.ndarray | None], list[CellState]]:
    """Outputs per step (None where masked) and the final cell states."""
    _require_recurrent(spec)
    seq = np.asarray(sequence, dtype=np.float64)
    msk = np.ones(len(seq)) if mask is None else np.asarray(mask)
    states = zero_state(spec) if states is None else states
    outputs: list[np.ndarray | None] = []
    for x, m in zip(seq, msk):
        if m == 0:
            outputs.append(None)
            continue
        states, cache = step(spec, params, x, states)
        outputs.append(cache.output)
    return outputs, states


def _chunk_backward(spec: NetworkSpec, params: Parameters, caches: list[StepCache | None],
                    targets: np.ndarray, loss_kind: LossKind, grads: Gradients,
                    step_deltas: list[np.ndarray]) -> float:
    depth = spec.recurrent_depth
    last = len(spec.layers) - 1
    dh_carry = [np.zeros(layer.hidden) for layer in spec.layers[:depth]]
    dc_carry = [np.zeros(layer.hidden) for layer in spec.layers[:depth]]
    total = 0.0
    for t in range(len(caches) - 1, -1, -1):
        cache = caches[t]
        if cache is None:
            # state passed through unchanged, so the carried gradient does too
            continue
        target = targets[t]
        total += loss(loss_kind, cache.output, target)
        delta = output_delta(spec.activation_of(last), loss_kind, cache.head_pre[-1], cache.output, target)
        for idx in range(last, depth - 1, -1):
            k = idx - depth
            step_deltas[idx][t] = delta
            layer_grads, grad_x = kernel_for(spec.layers[idx]).backward(
                spec.layers[idx], params.layers[idx], cache.head_inputs[k], delta)
            for name, value in layer_grads.items():
                grads.layers[idx][name] += value
            if idx > depth:
                delta = activation_backward(spec.activation_of(idx - 1), cache.head_pre[k - 1],
                                            cache.head_inputs[k], grad_x)
            else:
                from_above = grad_x
        for l in range(depth - 1, -1, -1):
            dh = dh_carry[l] + from_above
            dx, dh_prev, dc_prev, dz = _cell_backward(
                spec.layers[l], params.layers[l], cache.cells[l], dh, dc_carry[l], grads.layers[l])
            step_deltas[l][t] = dz
            dh_carry[l] = dh_prev
            if dc_prev is not None:
                dc_carry[l] = dc_prev
            from_above = dx
    return total


def tbptt_step(spec: NetworkSpec, params: Parameters, sequence, targets, mask=None,
               truncation: int = DEFAULT_TRUNCATION, loss_kind: LossKind = "cross_entropy",
               states: list[CellState] | None = None) -> tuple[Gradients, float]:
    """Summed loss and gradients over one sequence with truncated BPTT.

    The sequence is cut into consecutive chunks of ``truncation`` steps. State
    flows forward across chunk boundaries; gradients do not flow back across them.
    ``Gradients.deltas[j]`` holds the per-step δ of layer j, zero at masked steps.
    """
    grads, value, _ = tbptt_with_state(spec, params, sequence, targets, mask, truncation, loss_kind, states)
    return grads, value


def tbptt_with_state(spec: NetworkSpec, params: Parameters, sequence, targets, mask=None,
                     truncation: int = DEFAULT_TRUNCATION, loss_kind: LossKind = "cross_entropy",
                     states: list[CellState] | None = None) -> tuple[Gradients, float, list[CellState]]:
    _require_recurrent(spec)
    if truncation < 1:
        raise RangeError(f"truncation must be >= 1, got {truncation}")
    seq, tgt, msk = _check_sequence(spec, sequence, targets, mask)
    states = zero_state(spec) if states is None else states

    grads = Gradients.zeros_for(params)
    widths = [p["b"].shape[0] for p in params.layers]
    step_deltas = [np.zeros((len(seq), w)) for w in widths]
    total = 0.0
    for start in range(0, len(seq), truncation):
        stop = min(start + truncation, len(seq))
        caches: list[StepCache | None] = []
        for t in range(start, stop):
            if msk[t] == 0:
                caches.append(None)
                continue
            states, cache = step(spec, params, seq[t], states)
            caches.append(cache)
        chunk_deltas = [d[start:stop] for d in step_deltas]
        total += _chunk_backward(spec, params, caches, tgt[start:stop], loss_kind, grads, chunk_deltas)
    grads.deltas = list(step_deltas)
    return grads, total, states


def one_hot(index: int, size: int) -> np.ndarray:
    v = np.zeros(size)
    v[index] = 1.0
    return v


def sample_sequence(spec: NetworkSpec, params: Parameters, seed_char: int, length: int, rng: Rng,
                    mode: Literal["greedy", "stochastic"] = "stochastic") -> list[int]:
    """Generate exactly ``length`` character indices, feeding each one back in."""
    _require_recurrent(spec)
    validate_params(spec, params)
    vocab = spec.input_shape[0]
    if spec.output_size != vocab:
        raise ShapeError(f"sampling needs output size == vocabulary ({spec.output_size} != {vocab})")
    if not 0 <= seed_char < vocab:
        raise RangeError(f"seed character {seed_char} outside vocabulary of {vocab}")
    if length < 1:
        raise RangeError(f"length must be >= 1, got {length}")

    states = zero_state(spec)
    current = seed_char
    out: list[int] = []
    for _ in range(length):
        states, cache = step(spec, params, one_hot(current, vocab), states)
        probs = cache.output
        if mode == "greedy":
            current = int(np.argmax(probs))
        else:
            current = rng.choice(vocab, p=probs / probs.sum())
        out.append(current)
    return out
