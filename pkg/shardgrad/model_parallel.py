"""Distributed backpropagation over column-partitioned weight matrices.

F workers cooperate on every example. Worker 0 is the master: it also owns
shard 0 and keeps the output matrix W^{n-2} whole. Matrices W^0..W^{n-3} are
split by contiguous column ranges, so worker k owns the neurons P_k of every
hidden layer and computes their activations.

Per example (hypercube exchange):

* master sends each worker the input plus its share of the label (InitData);
* for each hidden layer the owners compute their block and run a
  recursive-doubling all-gather, after which everyone holds the full vector;
* backward, for i = n-2 .. 1 the master broadcasts δ^{i+1}; each worker turns it
  into δ^i[P_k] through its row mirror W^i[P_k, :], accumulates the gradients of
  its column shard and its mirror, and returns the block to the master, which
  places the disjoint blocks in ascending worker order.

The optimizer commit rides in the ``layer`` field of InitData: 0 means
accumulate only, m >= 1 means apply the mean of the m accumulated examples,
and ``FORWARD_ONLY`` skips the backward phase. A ParamPull of kind
``COMMIT_GRADS`` commits outside any example.
"""
from __future__ import annotations

import asyncio
import logging
import math
import time
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import Field, model_validator

from shardgrad.config import DomainConfig
from shardgrad.data_io import ImageDataset, batches
from shardgrad.errors import InfeasiblePartitionError, ShapeError, TransportError, UnsupportedTopologyError
from shardgrad.network.layers import dense_bias_grad, dense_input_grad, dense_pre, dense_weight_grad
from shardgrad.network.params import Gradients, Parameters, validate_params
from shardgrad.network.passes import ForwardTrace, LossKind, loss, output_delta
from shardgrad.network.spec import NetworkSpec
from shardgrad.optim import Optimizer, OptimizerConfig
from shardgrad.tensor import Rng, activation_apply, activation_backward
from shardgrad.training import EpochRecord, accuracy, grad_norm
from shardgrad.transport import (
    MASTER, InProcTransport, Message, MessageStats, Tag, TcpTransport, Transport,
    broadcast_from, gather_to, hypercube_exchange, is_power_of_two,
)

logger = logging.getLogger(__name__)

FORWARD_ONLY = 0xFFFF
PULL_PARAMS, PULL_GRADS, PULL_GRADS_AND_CLEAR, COMMIT_GRADS = 0, 1, 2, 3
CONTROL_TAGS = frozenset({Tag.INIT_DATA, Tag.PARAM_PULL, Tag.PARAM_STATE, Tag.SHUTDOWN})


class MpConfig(DomainConfig):
    workers: int = Field(1, ge=1)
    exchange: Literal["hypercube", "master_relay"] = "hypercube"
    deterministic: bool = False
    timeout: float | None = Field(None, gt=0)
    seed: int = 0
    transport: Literal["inproc", "tcp"] = "inproc"

    @model_validator(mode="after")
    def _hypercube_size(self) -> MpConfig:
        if self.exchange == "hypercube" and not is_power_of_two(self.workers):
            raise ValueError(f"hypercube exchange needs a power-of-two worker count, got {self.workers}")
        return self


def split_ranges(count: int, parts: int) -> tuple[tuple[int, int], ...]:
    """Contiguous [start, end) ranges; the first ``count % parts`` get one extra."""
    base, extra = divmod(count, parts)
    ranges, start = [], 0
    for k in range(parts):
        size = base + (1 if k < extra else 0)
        ranges.append((start, start + size))
        start += size
    return tuple(ranges)


@dataclass(frozen=True)
class ShardMap:
    """Column ranges per partitioned matrix W^0..W^{n-3}, plus the label split."""

    F: int
    ranges: tuple[tuple[tuple[int, int], ...], ...]
    label_ranges: tuple[tuple[int, int], ...]

    def cols(self, matrix: int, worker: int) -> slice:
        start, end = self.ranges[matrix][worker]
        return slice(start, end)

    def sizes(self, matrix: int) -> list[int]:
        return [end - start for start, end in self.ranges[matrix]]

    @property
    def partitioned(self) -> int:
        return len(self.ranges)


def make_shard_map(spec: NetworkSpec, F: int) -> ShardMap:
    if F < 1:
        raise InfeasiblePartitionError(f"need at least one worker, got F={F}")
    if not spec.is_dense_only:
        raise UnsupportedTopologyError("model parallelism needs a network of dense layers only")
    if any(spec.activation_of(j) == "softmax" for j in range(spec.n - 2)):
        raise UnsupportedTopologyError("softmax hidden layers cannot be split by columns")
    ranges = []
    for j in range(spec.n - 2):
        cols = spec.b[j + 1]
        if F > cols:
            raise InfeasiblePartitionError(f"W^{j} has {cols} columns, fewer than F={F} workers")
        ranges.append(split_ranges(cols, F))
    return ShardMap(F=F, ranges=tuple(ranges), label_ranges=split_ranges(spec.b[-1], F))


class ShardWorker:
    """State owned by one worker: column shards, row mirrors and their gradients."""

    def __init__(self, worker_id: int, spec: NetworkSpec, shard_map: ShardMap,
                 optimizer_config: OptimizerConfig) -> None:
        self.worker_id = worker_id
        self.spec = spec
        self.shard_map = shard_map
        self.optimizer = Optimizer(optimizer_config)
        self.cols: list[dict[str, np.ndarray]] = []
        self.rows: dict[int, np.ndarray] = {}
        self.col_grads: list[dict[str, np.ndarray]] = []
        self.row_grads: dict[int, np.ndarray] = {}
        self._blocks: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    # ── state ────────────────────────────────────────────────────────────────

    def load(self, params: Parameters) -> None:
        k = self.worker_id
        self.cols = []
        for j in range(self.shard_map.partitioned):
            cols = self.shard_map.cols(j, k)
            layer = params.layers[j]
            self.cols.append({"W": layer["W"][:, cols].copy(), "b": layer["b"][cols].copy()})
        # hidden layer i's neurons are the columns of W^{i-1}
        self.rows = {
            i: params.layers[i]["W"][self.shard_map.cols(i - 1, k), :].copy()
            for i in range(1, self.spec.n - 1)
        }
        self.clear_grads()

    def clear_grads(self) -> None:
        self.col_grads = [{k: np.zeros_like(v) for k, v in c.items()} for c in self.cols]
        self.row_grads = {i: np.zeros_like(r) for i, r in self.rows.items()}

    def _arrays(self, cols, rows) -> list[np.ndarray]:
        out = []
        for c in cols:
            out.extend([c["W"].ravel(), c["b"]])
        out.extend(rows[i].ravel() for i in sorted(rows))
        return out

    def column_state(self) -> np.ndarray:
        return _concat(self._arrays(self.cols, {}))

    def column_grads(self) -> np.ndarray:
        return _concat(self._arrays(self.col_grads, {}))

    def full_state(self) -> np.ndarray:
        return _concat(self._arrays(self.cols, self.rows))

    def load_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for c in self.cols:
            for name in ("W", "b"):
                size = c[name].size
                c[name] = flat[offset:offset + size].reshape(c[name].shape).copy()
                offset += size
        for i in sorted(self.rows):
            size = self.rows[i].size
            self.rows[i] = flat[offset:offset + size].reshape(self.rows[i].shape).copy()
            offset += size
        if offset != flat.size:
            raise ShapeError(f"worker {self.worker_id}: state has {flat.size} values, expected {offset}")
        self.clear_grads()

    # ── numerics ─────────────────────────────────────────────────────────────

    def forward_block(self, i: int, a_prev: np.ndarray) -> np.ndarray:
        """Activations of this worker's neurons in hidden layer i."""
        shard = self.cols[i - 1]
        pre = dense_pre(a_prev, shard["W"], shard["b"])
        post = activation_apply(self.spec.activation_of(i - 1), pre)
        self._blocks[i] = (pre, post)
        return post

    def backward_block(self, i: int, a_prev: np.ndarray, delta_next: np.ndarray) -> np.ndarray:
        """δ^i for this worker's neurons; accumulates mirror and column-shard gradients."""
        pre, post = self._blocks[i]
        self.row_grads[i] += dense_weight_grad(post, delta_next)
        grad_out = dense_input_grad(self.rows[i], delta_next)
        delta = activation_backward(self.spec.activation_of(i - 1), pre, post, grad_out)
        self.col_grads[i - 1]["W"] += dense_weight_grad(a_prev, delta)
        self.col_grads[i - 1]["b"] += dense_bias_grad(delta)
        return delta

    def triples(self, m: int) -> list[tuple[str, np.ndarray, np.ndarray]]:
        scale = 1.0 / m
        out = []
        for j, (c, g) in enumerate(zip(self.cols, self.col_grads)):
            out.append((f"col.{j}.W", c["W"], g["W"] * scale))
            out.append((f"col.{j}.b", c["b"], g["b"] * scale))
        for i in sorted(self.rows):
            out.append((f"row.{i}", self.rows[i], self.row_grads[i] * scale))
        return out

    def commit(self, m: int, extra=()) -> None:
        self.optimizer.apply_arrays(self.triples(m) + list(extra))
        self.clear_grads()


def _concat(parts: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(parts) if parts else np.zeros(0)


class ModelParallelEngine:
    """Master-side handle on F cooperating worker tasks.

    Use as ``async with ModelParallelEngine(...) as engine``; worker tasks live
    for the lifetime of the context. Any exception in a worker task is re-raised
    from the master call that is waiting on it.
    """

    def __init__(self, spec: NetworkSpec, params: Parameters, config: MpConfig | None = None,
                 optimizer_config: OptimizerConfig | None = None, loss_kind: LossKind = "cross_entropy",
                 transport: Transport | None = None) -> None:
        self.config = config or MpConfig()
        self.spec = spec
        self.loss_kind = loss_kind
        F = self.config.workers
        self.shard_map = make_shard_map(spec, F)
        validate_params(spec, params)
        self.optimizer_config = optimizer_config or OptimizerConfig()
        self.transport = transport or self._make_transport()
        self.F = F

        self._shards = [ShardWorker(k, spec, self.shard_map, self.optimizer_config) for k in range(F)]
        for shard in self._shards:
            shard.load(params)
        self.master = self._shards[MASTER]
        out = params.layers[-1]
        self.out = {"W": out["W"].copy(), "b": out["b"].copy()}
        self.out_grads = {k: np.zeros_like(v) for k, v in self.out.items()}
        self._tasks: list[asyncio.Task] = []
        self._pending_backward = False

    def _make_transport(self) -> Transport:
        cfg = self.config
        if cfg.transport == "tcp":
            return TcpTransport(cfg.workers, timeout=cfg.timeout)
        return InProcTransport(cfg.workers, deterministic=cfg.deterministic, seed=cfg.seed, timeout=cfg.timeout)

    # ── lifecycle ────────────────────────────────────────────────────────────

    async def start(self) -> None:
        await self.transport.start()
        self._tasks = [
            asyncio.create_task(self._serve(self._shards[k]), name=f"mp-worker-{k}")
            for k in range(1, self.F)
        ]
        # workers own their shards from here on
        self._shards = [self.master]
        logger.info("Model-parallel engine started: F=%d, exchange=%s, layers=%s",
                    self.F, self.config.exchange, list(self.spec.b))

    async def close(self) -> None:
        ep = self.transport.endpoint(MASTER)
        try:
            if any(not t.done() for t in self._tasks):
                await broadcast_from(ep, Message.of(Tag.SHUTDOWN, 0, [], MASTER), range(self.F))
            for task in self._tasks:
                try:
                    await task
                except Exception:
                    logger.exception("Worker task %s failed", task.get_name())
        finally:
            await self.transport.close()
            logger.info("Model-parallel engine stopped")

    async def __aenter__(self) -> ModelParallelEngine:
        await self.start()
        return self

    async def __aexit__(self, *exc) -> None:
        await self.close()

    async def _supervised(self, coro):
        main = asyncio.ensure_future(coro)
        while not main.done():
            pending = [t for t in self._tasks if not t.done()]
            await asyncio.wait([main, *pending], return_when=asyncio.FIRST_COMPLETED)
            for task in self._tasks:
                if task.done() and not task.cancelled() and task.exception() is not None:
                    main.cancel()
                    raise task.exception()
            if not pending and not main.done():
                await main
        return main.result()

    # ── worker side ──────────────────────────────────────────────────────────

    async def _serve(self, shard: ShardWorker) -> None:
        ep = self.transport.endpoint(shard.worker_id)
        while True:
            msg = await ep.recv(tag=CONTROL_TAGS, sender=MASTER, timeout=math.inf)
            if msg.tag == Tag.SHUTDOWN:
                return
            if msg.tag == Tag.INIT_DATA:
                await self._worker_example(shard, msg)
            elif msg.tag == Tag.PARAM_PULL and msg.layer == COMMIT_GRADS:
                shard.commit(int(msg.payload[0]))
            elif msg.tag == Tag.PARAM_PULL:
                if msg.layer == PULL_PARAMS:
                    await ep.send(MASTER, Message.of(Tag.PARAM_STATE, 0, shard.column_state(), shard.worker_id))
                else:
                    await ep.send(MASTER, Message.of(Tag.GRAD_PUSH, 0, shard.column_grads(), shard.worker_id))
                    if msg.layer == PULL_GRADS_AND_CLEAR:
                        shard.clear_grads()
            elif msg.tag == Tag.PARAM_STATE:
                shard.load_flat(msg.payload)

    async def _worker_example(self, shard: ShardWorker, init: Message) -> None:
        ep = self.transport.endpoint(shard.worker_id)
        n = self.spec.n
        a = [init.payload[:self.spec.b[0]]]
        for i in range(1, n - 1):
            a.append(await self._exchange(shard, i, a[i - 1]))
        if init.layer == FORWARD_ONLY:
            return
        for i in range(n - 2, 0, -1):
            msg = await ep.recv(tag=Tag.ERROR_BROADCAST, sender=MASTER, layer=i + 1)
            block = await self.transport.compute(shard.backward_block, i, a[i - 1], msg.payload)
            await ep.send(MASTER, Message.of(Tag.PARTIAL_ERROR, i, block, shard.worker_id))
        if init.layer >= 1:
            shard.commit(init.layer)

    async def _exchange(self, shard: ShardWorker, i: int, a_prev: np.ndarray) -> np.ndarray:
        """Compute this worker's block of hidden layer i and return the full a^i."""
        block = await self.transport.compute(shard.forward_block, i, a_prev)
        ep = self.transport.endpoint(shard.worker_id)
        sizes = self.shard_map.sizes(i - 1)
        if self.config.exchange == "hypercube":
            return await hypercube_exchange(ep, sizes, block, layer=i)
        if shard.worker_id != MASTER:
            await ep.send(MASTER, Message.of(Tag.PARTIAL_ACTIVATION, i, block, shard.worker_id))
            msg = await ep.recv(tag=Tag.ACTIVATION_BROADCAST, sender=MASTER, layer=i)
            return msg.payload
        parts = await gather_to(ep, range(self.F), Tag.PARTIAL_ACTIVATION, layer=i)
        full = np.concatenate([block] + [m.payload for m in parts])
        await broadcast_from(ep, Message.of(Tag.ACTIVATION_BROADCAST, i, full, MASTER), range(self.F))
        return full

    # ── master side ──────────────────────────────────────────────────────────

    def _check_example(self, x: np.ndarray, target: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.spec.b[0],):
            raise ShapeError(f"input must have length {self.spec.b[0]}, got shape {x.shape}")
        if target is None:
            target = np.zeros(self.spec.b[-1])
        target = np.asarray(target, dtype=np.float64)
        if target.shape != (self.spec.b[-1],):
            raise ShapeError(f"target must have length {self.spec.b[-1]}, got shape {target.shape}")
        return x, target

    async def _forward(self, x: np.ndarray, target: np.ndarray | None, flag: int) -> ForwardTrace:
        x, target = self._check_example(x, target)
        ep = self.transport.endpoint(MASTER)
        for k in range(1, self.F):
            start, end = self.shard_map.label_ranges[k]
            await ep.send(k, Message.of(Tag.INIT_DATA, flag, np.concatenate([x, target[start:end]]), MASTER))
        activations = [x]
        pre: list[np.ndarray | None] = []
        for i in range(1, self.spec.n - 1):
            activations.append(await self._exchange(self.master, i, activations[i - 1]))
            pre.append(None)
        last = len(self.spec.layers) - 1
        z = dense_pre(activations[-1], self.out["W"], self.out["b"])
        pre.append(z)
        activations.append(activation_apply(self.spec.activation_of(last), z))
        return ForwardTrace(activations=activations, pre=pre)

    async def _backward(self, trace: ForwardTrace, target: np.ndarray, commit: int) -> tuple[Gradients, float]:
        ep = self.transport.endpoint(MASTER)
        spec = self.spec
        last = len(spec.layers) - 1
        target = np.asarray(target, dtype=np.float64)
        value = loss(self.loss_kind, trace.output, target)
        deltas: list[np.ndarray | None] = [None] * len(spec.layers)
        delta = output_delta(spec.activation_of(last), self.loss_kind, trace.pre[last], trace.output, target)
        deltas[last] = delta
        out_grads = {"W": dense_weight_grad(trace.activations[-2], delta), "b": dense_bias_grad(delta)}
        self.out_grads["W"] += out_grads["W"]
        self.out_grads["b"] += out_grads["b"]

        for i in range(spec.n - 2, 0, -1):
            await broadcast_from(ep, Message.of(Tag.ERROR_BROADCAST, i + 1, delta, MASTER), range(self.F))
            own = await self.transport.compute(self.master.backward_block, i, trace.activations[i - 1], delta)
            parts = await gather_to(ep, range(self.F), Tag.PARTIAL_ERROR, layer=i)
            assembled = np.zeros(spec.b[i])
            for worker, block in [(MASTER, own)] + [(m.sender, m.payload) for m in parts]:
                assembled[self.shard_map.cols(i - 1, worker)] += block
            deltas[i - 1] = assembled
            delta = assembled

        if commit >= 1:
            self._commit_master(commit)

        layers: list[dict[str, np.ndarray]] = [dict() for _ in spec.layers]
        layers[last] = out_grads
        return Gradients(layers, deltas), value

    def _commit_master(self, m: int) -> None:
        scale = 1.0 / m
        extra = [("out.W", self.out["W"], self.out_grads["W"] * scale),
                 ("out.b", self.out["b"], self.out_grads["b"] * scale)]
        self.master.commit(m, extra)
        self.out_grads = {k: np.zeros_like(v) for k, v in self.out.items()}

    async def forward(self, x: np.ndarray, target: np.ndarray | None = None,
                      keep_for_backward: bool = False) -> ForwardTrace:
        """Forward pass. Unless ``keep_for_backward``, workers skip the backward phase."""
        if self._pending_backward:
            raise RuntimeError("previous forward pass is still waiting for its backward pass")
        flag = 0 if keep_for_backward else FORWARD_ONLY
        trace = await self._supervised(self._forward(x, target, flag))
        self._pending_backward = keep_for_backward
        return trace

    async def backward(self, trace: ForwardTrace, target: np.ndarray) -> tuple[Gradients, float]:
        """Backward pass for the trace of ``forward(..., keep_for_backward=True)``; no optimizer step."""
        if not self._pending_backward:
            raise RuntimeError("no forward pass is waiting for a backward pass")
        _, target = self._check_example(trace.activations[0], target)
        self._pending_backward = False
        return await self._supervised(self._backward(trace, target, 0))

    async def forward_backward(self, x: np.ndarray, target: np.ndarray,
                               commit: int = 0) -> tuple[ForwardTrace, Gradients, float]:
        """One example; ``commit >= 1`` applies the optimizer to the mean of the last ``commit`` examples."""
        if self._pending_backward:
            raise RuntimeError("previous forward pass is still waiting for its backward pass")
        if not 0 <= commit < FORWARD_ONLY:
            raise ValueError(f"commit must be in [0, {FORWARD_ONLY}), got {commit}")

        async def run():
            trace = await self._forward(x, target, commit)
            grads, value = await self._backward(trace, target, commit)
            return trace, grads, value

        return await self._supervised(run())

    async def train_batch(self, xs, ys) -> tuple[float, MessageStats]:
        """Accumulate over the batch and commit one optimizer step; returns (mean loss, traffic)."""
        before = self.transport.stats.snapshot()
        m = len(xs)
        if m == 0 or m != len(ys):
            raise ShapeError(f"batch needs equal, non-zero input and target counts ({m}, {len(ys)})")
        total = 0.0
        for idx, (x, y) in enumerate(zip(xs, ys)):
            _, _, value = await self.forward_backward(x, y, commit=m if idx == m - 1 else 0)
            total += value
        return total / m, self.transport.stats.snapshot() - before

    async def train_batch_measured(self, xs, ys) -> tuple[float, MessageStats, float]:
        """``train_batch`` that also returns the norm of the mean batch gradient.

        The gradient gather and the commit happen after the traffic snapshot, so
        the returned stats equal those of ``train_batch``.
        """
        before = self.transport.stats.snapshot()
        m = len(xs)
        if m == 0 or m != len(ys):
            raise ShapeError(f"batch needs equal, non-zero input and target counts ({m}, {len(ys)})")
        total = 0.0
        for x, y in zip(xs, ys):
            _, _, value = await self.forward_backward(x, y)
            total += value
        traffic = self.transport.stats.snapshot() - before
        norm = grad_norm(await self.gather_gradients()) / m
        await self.commit(m)
        return total / m, traffic, norm

    async def commit(self, m: int) -> None:
        """Apply the optimizer to the mean of the ``m`` accumulated examples on every shard."""
        if m < 1:
            raise ValueError(f"commit needs at least one example, got {m}")

        async def run():
            ep = self.transport.endpoint(MASTER)
            await broadcast_from(ep, Message.of(Tag.PARAM_PULL, COMMIT_GRADS, [m], MASTER), range(self.F))
            self._commit_master(m)
        await self._supervised(run())

    # ── parameter movement (outside the per-example accounting) ──────────────

    async def gather_parameters(self) -> Parameters:
        async def run():
            ep = self.transport.endpoint(MASTER)
            await broadcast_from(ep, Message.of(Tag.PARAM_PULL, PULL_PARAMS, [], MASTER), range(self.F))
            parts = await gather_to(ep, range(self.F), Tag.PARAM_STATE)
            flats = [self.master.column_state()] + [m.payload for m in parts]
            return self._assemble(flats, self.out)
        return await self._supervised(run())

    async def gather_gradients(self, clear: bool = False) -> Gradients:
        """Accumulated (unscaled) gradients, reassembled to full shape."""
        async def run():
            ep = self.transport.endpoint(MASTER)
            kind = PULL_GRADS_AND_CLEAR if clear else PULL_GRADS
            await broadcast_from(ep, Message.of(Tag.PARAM_PULL, kind, [], MASTER), range(self.F))
            parts = await gather_to(ep, range(self.F), Tag.GRAD_PUSH)
            flats = [self.master.column_grads()] + [m.payload for m in parts]
            full = self._assemble(flats, self.out_grads)
            if clear:
                self.master.clear_grads()
                self.out_grads = {k: np.zeros_like(v) for k, v in self.out.items()}
            return Gradients(full.layers, [None] * len(full.layers))
        return await self._supervised(run())

    async def load_parameters(self, params: Parameters) -> None:
        """Scatter full parameters to every shard and mirror; clears accumulated gradients."""
        validate_params(self.spec, params)

        async def run():
            ep = self.transport.endpoint(MASTER)
            for k in range(1, self.F):
                scratch = ShardWorker(k, self.spec, self.shard_map, self.optimizer_config)
                scratch.load(params)
                await ep.send(k, Message.of(Tag.PARAM_STATE, 0, scratch.full_state(), MASTER))
            self.master.load(params)
            self.out = {k: v.copy() for k, v in params.layers[-1].items()}
            self.out_grads = {k: np.zeros_like(v) for k, v in self.out.items()}
        await self._supervised(run())

    def _assemble(self, flats: list[np.ndarray], out: dict[str, np.ndarray]) -> Parameters:
        spec = self.spec
        layers: list[dict[str, np.ndarray]] = []
        for j in range(self.shard_map.partitioned):
            rows, cols = spec.b[j], spec.b[j + 1]
            layers.append({"W": np.zeros((rows, cols)), "b": np.zeros(cols)})
        for k, flat in enumerate(flats):
            offset = 0
            for j in range(self.shard_map.partitioned):
                cols = self.shard_map.cols(j, k)
                width = cols.stop - cols.start
                size = spec.b[j] * width
                layers[j]["W"][:, cols] = flat[offset:offset + size].reshape(spec.b[j], width)
                offset += size
                layers[j]["b"][cols] = flat[offset:offset + width]
                offset += width
            if offset != flat.size:
                raise TransportError(f"worker {k} sent {flat.size} values, expected {offset}")
        layers.append({k: v.copy() for k, v in out.items()})
        return Parameters(layers)


# ── Functional entry points ──────────────────────────────────────────────────

async def mp_forward(engine: ModelParallelEngine, x: np.ndarray, target: np.ndarray | None = None,
                     keep_for_backward: bool = False) -> ForwardTrace:
    """Distributed forward pass; the master ends up with every layer's activations.

    Hidden pre-activations stay with the workers that own them (``None`` in the trace).
    """
    return await engine.forward(x, target, keep_for_backward)


async def mp_backward(engine: ModelParallelEngine, trace: ForwardTrace,
                      target: np.ndarray) -> tuple[Gradients, float]:
    """Distributed backward pass without an optimizer step.

    The returned Gradients hold the output layer and the assembled δ chain;
    column-shard gradients stay at their workers until ``gather_gradients``.
    """
    return await engine.backward(trace, target)


async def mp_train_step(engine: ModelParallelEngine, x: np.ndarray, target: np.ndarray) -> tuple[float, MessageStats]:
    """One forward + backward + update; returns (loss, traffic of this step)."""
    return await engine.train_batch([x], [target])


async def mp_train_batch(engine: ModelParallelEngine, xs, ys) -> tuple[float, MessageStats]:
    return await engine.train_batch(xs, ys)


class ModelParallelTrainer:
    """Epochs of mini-batch training through one engine; counts per-example traffic per epoch."""

    def __init__(self, spec: NetworkSpec, config: MpConfig, optimizer_config: OptimizerConfig,
                 loss_kind: LossKind = "cross_entropy", seed: int = 0) -> None:
        self.spec = spec
        self.config = config
        self.optimizer_config = optimizer_config
        self.loss_kind = loss_kind
        self.rng = Rng(seed)

    async def fit(self, params: Parameters, train: ImageDataset, test: ImageDataset | None = None,
                  epochs: int = 1) -> tuple[Parameters, list[EpochRecord]]:
        records: list[EpochRecord] = []
        async with ModelParallelEngine(self.spec, params, self.config, self.optimizer_config,
                                       self.loss_kind) as engine:
            for epoch in range(1, epochs + 1):
                started = time.perf_counter()
                total, count, traffic, norms = 0.0, 0, MessageStats(), []
                for inputs, targets, mask in batches(train, self.optimizer_config.batch, self.rng):
                    keep = mask == 1
                    if not keep.any():
                        continue
                    mean_loss, stats, norm = await engine.train_batch_measured(inputs[keep], targets[keep])
                    norms.append(norm)
                    total += mean_loss * int(keep.sum())
                    count += int(keep.sum())
                    traffic.message_count += stats.message_count
                    traffic.data_units += stats.data_units
                wall_ms = (time.perf_counter() - started) * 1000.0
                current = await engine.gather_parameters()
                test_acc = accuracy(self.spec, current, test) if test is not None else None
                records.append(EpochRecord(epoch, total / max(count, 1), test_acc, wall_ms,
                                           float(np.mean(norms)) if norms else 0.0,
                                           traffic.message_count, traffic.data_units))
                logger.info("Epoch %d (F=%d): loss=%.6f accuracy=%s messages=%d units=%d (%.0f ms)",
                            epoch, self.config.workers, records[-1].train_loss,
                            "n/a" if test_acc is None else f"{test_acc:.4f}",
                            traffic.message_count, traffic.data_units, wall_ms)
            final = await engine.gather_parameters()
        return final, records
