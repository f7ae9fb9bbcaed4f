"""Asynchronous data parallelism around a central parameter server.

Endpoint 0 of the transport is the server; replicas are endpoints 1..R. A
replica pulls parameters every ``n_fetch`` steps (PARAM_PULL -> PARAM_STATE),
computes mini-batch gradients on its own shard, and pushes the sum of the
gradients it accumulated every ``n_push`` steps (GRAD_PUSH). The server applies
pushes one at a time in arrival order and answers each with a receipt.

Wire payloads (float64 vectors):

* GRAD_PUSH   ``[computed_at, step, *flat_grads]``
* PARAM_STATE ``[version, *flat_params]``        (layer ``STATE_SNAPSHOT``)
* PARAM_STATE ``[version, accepted, staleness]``  (layer ``STATE_RECEIPT``)

In deterministic mode a round-robin turn scheduler lets exactly one replica
step (pull, compute, push) run at a time and gradient work runs inline.
"""
from __future__ import annotations

import asyncio
import contextlib
import logging
import math
import threading
import time
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from pydantic import Field

from shardgrad.config import DomainConfig
from shardgrad.data_io import ImageDataset
from shardgrad.errors import GradientRejectedError, InfeasiblePartitionError, NumericError, RangeError, ShapeError
from shardgrad.model_parallel import ModelParallelEngine, MpConfig, split_ranges
from shardgrad.network.params import Gradients, Parameters, validate_params
from shardgrad.network.passes import LossKind
from shardgrad.network.recurrent import DEFAULT_TRUNCATION
from shardgrad.network.spec import NetworkSpec
from shardgrad.optim import Optimizer, OptimizerConfig
from shardgrad.training import EpochRecord, accuracy, batch_gradients, grad_norm
from shardgrad.transport import InProcTransport, Message, Tag, Transport

logger = logging.getLogger(__name__)

SERVER = 0
STATE_SNAPSHOT, STATE_RECEIPT = 0, 1
VERSION_LOG_EVERY = 100
SERVER_TAGS = frozenset({Tag.GRAD_PUSH, Tag.PARAM_PULL, Tag.SHUTDOWN})


class ReplicaConfig(DomainConfig):
    replicas: int = Field(1, ge=1)
    n_fetch: int = Field(1, ge=1)
    n_push: int = Field(1, ge=1)
    deterministic: bool = False
    timeout: float | None = Field(None, gt=0)


# ── Parameter server ─────────────────────────────────────────────────────────

@dataclass
class PushRecord:
    version: int
    replica: int | None
    step: int | None
    staleness: int
    grad_norm: float = 0.0


class ParameterServer:
    """Global parameters with serialized updates and consistent snapshots."""

    def __init__(self, params: Parameters, optimizer_config: OptimizerConfig) -> None:
        if not params.is_finite():
            raise NumericError("initial parameters contain non-finite values")
        self._params = params.copy()
        self.optimizer = Optimizer(optimizer_config)
        self.version = 0
        self.staleness: Counter[int] = Counter()
        self.pushes: list[PushRecord] = []
        self.rejected = 0
        self._lock = threading.Lock()

    def pull(self) -> tuple[Parameters, int]:
        with self._lock:
            return self._params.copy(), self.version

    def push_apply(self, grads: Parameters, lr: float | None = None, computed_at: int | None = None,
                   replica: int | None = None, step: int | None = None) -> int:
        """Apply one gradient push; returns the new version."""
        if not grads.same_structure(self._params):
            raise ShapeError("pushed gradients do not match the server's parameter shapes")
        if not grads.is_finite():
            self.rejected += 1
            logger.warning("Rejected non-finite gradient from replica %s (step %s) at version %d",
                           replica, step, self.version)
            raise GradientRejectedError(f"non-finite gradient from replica {replica} rejected at version {self.version}")
        with self._lock:
            computed_at = self.version if computed_at is None else computed_at
            staleness = self.version - computed_at
            self.optimizer.apply(self._params, grads, lr)
            self.version += 1
            self.staleness[staleness] += 1
            self.pushes.append(PushRecord(self.version, replica, step, staleness, grad_norm(grads)))
            version = self.version
        if version % VERSION_LOG_EVERY == 0:
            logger.info("Parameter server reached version %d (max staleness %d)", version, max(self.staleness))
        return version

    def params(self) -> Parameters:
        return self.pull()[0]

    async def serve(self, endpoint, replicas: int) -> None:
        """Answer pulls and pushes until every replica has sent SHUTDOWN."""
        template = self._params
        finished = 0
        while finished < replicas:
            msg = await endpoint.recv(tag=SERVER_TAGS, timeout=math.inf)
            if msg.tag == Tag.SHUTDOWN:
                finished += 1
            elif msg.tag == Tag.PARAM_PULL:
                params, version = self.pull()
                await endpoint.send(msg.sender, Message.of(
                    Tag.PARAM_STATE, STATE_SNAPSHOT, np.concatenate([[version], params.flatten()]), SERVER))
            else:
                computed_at, step = int(msg.payload[0]), int(msg.payload[1])
                grads = template.unflatten(msg.payload[2:])
                try:
                    version = self.push_apply(grads, computed_at=computed_at, replica=msg.sender, step=step)
                    receipt = [version, 1, self.pushes[-1].staleness]
                except GradientRejectedError:
                    receipt = [self.version, 0, 0]
                await endpoint.send(msg.sender, Message.of(Tag.PARAM_STATE, STATE_RECEIPT, receipt, SERVER))
        logger.info("Parameter server done: version %d, %d rejected pushes", self.version, self.rejected)


def ps_push_apply(server: ParameterServer, grads: Parameters, lr: float | None = None,
                  computed_at: int | None = None) -> int:
    return server.push_apply(grads, lr, computed_at)


def ps_pull(server: ParameterServer) -> tuple[Parameters, int]:
    return server.pull()


# ── Scheduling ───────────────────────────────────────────────────────────────

class TurnScheduler:
    """Round-robin turns over the live replicas, in ascending id order."""

    def __init__(self, replicas) -> None:
        self._order = sorted(replicas)
        self._pos = 0
        self._cond = asyncio.Condition()

    @contextlib.asynccontextmanager
    async def turn(self, replica: int):
        async with self._cond:
            await self._cond.wait_for(lambda: self._order[self._pos] == replica)
        try:
            yield
        finally:
            async with self._cond:
                self._pos = (self._pos + 1) % len(self._order)
                self._cond.notify_all()

    async def finish(self, replica: int) -> None:
        async with self._cond:
            idx = self._order.index(replica)
            self._order.pop(idx)
            if idx < self._pos:
                self._pos -= 1
            if self._pos >= len(self._order):
                self._pos = 0
            self._cond.notify_all()


# ── Gradient sources ─────────────────────────────────────────────────────────

class GradientSource(ABC):
    """Computes full-shape mean gradients for one replica."""

    async def start(self) -> None:
        pass

    async def close(self) -> None:
        pass

    @abstractmethod
    async def gradients(self, params: Parameters, version: int, inputs: np.ndarray, targets: np.ndarray,
                        mask: np.ndarray) -> tuple[Parameters, float]:
        ...


class LocalGradientSource(GradientSource):

    def __init__(self, spec: NetworkSpec, loss_kind: LossKind = "cross_entropy",
                 truncation: int = DEFAULT_TRUNCATION, offload: bool = True) -> None:
        self.spec = spec
        self.loss_kind = loss_kind
        self.truncation = truncation
        self.offload = offload

    async def gradients(self, params, version, inputs, targets, mask):
        args = (self.spec, params, inputs, targets, mask, self.loss_kind, self.truncation)
        if self.offload:
            grads, value, _ = await asyncio.get_running_loop().run_in_executor(None, batch_gradients, *args)
        else:
            grads, value, _ = batch_gradients(*args)
        return grads, value


class ModelParallelGradientSource(GradientSource):
    """Hybrid mode: the replica is itself a group of model-parallel workers."""

    def __init__(self, spec: NetworkSpec, params: Parameters, mp_config: MpConfig,
                 optimizer_config: OptimizerConfig | None = None, loss_kind: LossKind = "cross_entropy") -> None:
        self.engine = ModelParallelEngine(spec, params, mp_config, optimizer_config, loss_kind)
        self._loaded: int | None = None

    async def start(self) -> None:
        await self.engine.start()

    async def close(self) -> None:
        await self.engine.close()

    async def gradients(self, params, version, inputs, targets, mask):
        if self._loaded != version:
            await self.engine.load_parameters(params)
            self._loaded = version
        keep = np.asarray(mask) == 1
        xs, ys = np.asarray(inputs)[keep], np.asarray(targets)[keep]
        if len(xs) == 0:
            return Gradients.zeros_for(params), 0.0
        total = 0.0
        for x, y in zip(xs, ys):
            _, _, value = await self.engine.forward_backward(x, y, commit=0)
            total += value
        grads = await self.engine.gather_gradients(clear=True)
        return grads.scaled(1.0 / len(xs)), total / len(xs)


# ── Replicas ─────────────────────────────────────────────────────────────────

@dataclass
class StepRecord:
    replica: int
    step: int
    loss: float
    params_version: int
    pushed: bool = False
    server_version: int | None = None
    staleness: int | None = None


@dataclass
class TrainingLog:
    """Per-step replica records joined with the server's staleness records."""

    steps: list[StepRecord] = field(default_factory=list)
    pushes: list[PushRecord] = field(default_factory=list)

    @property
    def staleness_histogram(self) -> Counter[int]:
        return Counter(p.staleness for p in self.pushes)

    @property
    def max_staleness(self) -> int:
        return max((p.staleness for p in self.pushes), default=0)

    @property
    def mean_loss(self) -> float:
        return float(np.mean([s.loss for s in self.steps])) if self.steps else 0.0

    @property
    def mean_grad_norm(self) -> float:
        return float(np.mean([p.grad_norm for p in self.pushes])) if self.pushes else 0.0

    def for_replica(self, replica: int) -> list[StepRecord]:
        return [s for s in self.steps if s.replica == replica]


def shard_dataset(dataset: ImageDataset, replicas: int) -> list[ImageDataset]:
    """Contiguous, disjoint shards that together cover the dataset."""
    if not 1 <= replicas <= len(dataset):
        raise InfeasiblePartitionError(f"cannot split {len(dataset)} samples over {replicas} replicas")
    return [dataset.subset(np.arange(a, b)) for a, b in split_ranges(len(dataset), replicas)]


def replica_batch(shard: ImageDataset, batch_size: int, step: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mini-batch ``step`` of a shard, walking it cyclically."""
    if len(shard) == 0:
        raise RangeError("replica shard is empty")
    idx = (step * batch_size + np.arange(batch_size)) % len(shard)
    return shard.images[idx], shard.one_hot(idx), np.ones(batch_size)


async def _pull(endpoint, template: Parameters) -> tuple[Parameters, int]:
    await endpoint.send(SERVER, Message.of(Tag.PARAM_PULL, 0, [], endpoint.worker_id))
    msg = await endpoint.recv(tag=Tag.PARAM_STATE, sender=SERVER, layer=STATE_SNAPSHOT)
    return template.unflatten(msg.payload[1:]), int(msg.payload[0])


async def replica_run(replica: int, endpoint, config: ReplicaConfig, source: GradientSource,
                      shard: ImageDataset, steps: int, batch_size: int, template: Parameters,
                      scheduler: TurnScheduler | None = None, first_step: int = 0) -> list[StepRecord]:
    """Pull, compute and push for ``steps`` steps; SHUTDOWN is always sent at the end."""
    if len(shard) == 0:
        raise RangeError(f"replica {replica} has an empty shard")
    records: list[StepRecord] = []
    params, version = template, 0
    pending: np.ndarray | None = None
    oldest = 0
    try:
        for s in range(steps):
            turn = scheduler.turn(replica) if scheduler is not None else contextlib.nullcontext()
            async with turn:
                if s % config.n_fetch == 0:
                    params, version = await _pull(endpoint, template)
                step = first_step + s
                inputs, targets, mask = replica_batch(shard, batch_size, step)
                grads, value = await source.gradients(params, version, inputs, targets, mask)
                flat = grads.flatten()
                if pending is None:
                    pending, oldest = flat, version
                else:
                    pending = pending + flat
                record = StepRecord(replica, step, value, version)
                if (s + 1) % config.n_push == 0 or s == steps - 1:
                    payload = np.concatenate([[oldest, step], pending])
                    await endpoint.send(SERVER, Message.of(Tag.GRAD_PUSH, 0, payload, replica))
                    receipt = await endpoint.recv(tag=Tag.PARAM_STATE, sender=SERVER, layer=STATE_RECEIPT)
                    if receipt.payload[1] == 0:
                        raise GradientRejectedError(f"replica {replica}: server rejected the push at step {step}")
                    record.pushed = True
                    record.server_version = int(receipt.payload[0])
                    record.staleness = int(receipt.payload[2])
                    pending = None
                records.append(record)
    finally:
        if scheduler is not None:
            await scheduler.finish(replica)
        await endpoint.send(SERVER, Message.of(Tag.SHUTDOWN, 0, [], replica))
    return records


# ── Orchestration ────────────────────────────────────────────────────────────

class DataParallelEngine:
    """A parameter server plus ``replicas`` replicas, one transport per run.

    Use as ``async with DataParallelEngine(...) as engine`` so gradient sources
    (model-parallel groups in hybrid mode) live across runs.
    """

    def __init__(self, spec: NetworkSpec, params: Parameters, config: ReplicaConfig | None = None,
                 optimizer_config: OptimizerConfig | None = None, loss_kind: LossKind = "cross_entropy",
                 sources: list[GradientSource] | None = None) -> None:
        self.config = config or ReplicaConfig()
        validate_params(spec, params)
        self.spec = spec
        self.server = ParameterServer(params, optimizer_config or OptimizerConfig())
        R = self.config.replicas
        if sources is None:
            sources = [LocalGradientSource(spec, loss_kind, offload=not self.config.deterministic)
                       for _ in range(R)]
        if len(sources) != R:
            raise ShapeError(f"{R} replicas need {R} gradient sources, got {len(sources)}")
        self.sources = sources
        self.transport: Transport | None = None

    async def __aenter__(self) -> DataParallelEngine:
        for source in self.sources:
            await source.start()
        return self

    async def __aexit__(self, *exc) -> None:
        for source in self.sources:
            await source.close()

    async def run(self, shards: list[ImageDataset], steps: int, batch_size: int, first_step: int = 0) -> TrainingLog:
        R = self.config.replicas
        if len(shards) != R:
            raise ShapeError(f"{R} replicas need {R} shards, got {len(shards)}")
        transport = InProcTransport(R + 1, timeout=self.config.timeout)
        self.transport = transport
        await transport.start()
        template = self.server.params()
        scheduler = TurnScheduler(range(1, R + 1)) if self.config.deterministic else None
        pushes_before = len(self.server.pushes)

        server_task = asyncio.create_task(self.server.serve(transport.endpoint(SERVER), R), name="param-server")
        replica_tasks = [
            asyncio.create_task(
                replica_run(r, transport.endpoint(r), self.config, self.sources[r - 1], shards[r - 1],
                            steps, batch_size, template, scheduler, first_step),
                name=f"replica-{r}",
            )
            for r in range(1, R + 1)
        ]
        tasks = [server_task, *replica_tasks]
        try:
            results = await asyncio.gather(*tasks)
        finally:
            for task in tasks:
                if not task.done():
                    task.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)
            await transport.close()
        log = TrainingLog(pushes=self.server.pushes[pushes_before:])
        for records in results[1:]:
            log.steps.extend(records)
        log.steps.sort(key=lambda r: (r.step, r.replica))
        logger.info("Data-parallel run: %d replicas x %d steps, server version %d, max staleness %d",
                    R, steps, self.server.version, log.max_staleness)
        return log


async def run_data_parallel(spec: NetworkSpec, params: Parameters, train: ImageDataset, config: ReplicaConfig,
                            optimizer_config: OptimizerConfig, steps: int, loss_kind: LossKind = "cross_entropy",
                            sources: list[GradientSource] | None = None) -> tuple[Parameters, TrainingLog]:
    """Shard ``train``, run every replica for ``steps`` steps, return the server's parameters and the log."""
    async with DataParallelEngine(spec, params, config, optimizer_config, loss_kind, sources) as engine:
        log = await engine.run(shard_dataset(train, config.replicas), steps, optimizer_config.batch)
    return engine.server.params(), log


class DataParallelTrainer:
    """Epoch loop over a DataParallelEngine; one epoch walks the largest shard once."""

    def __init__(self, spec: NetworkSpec, config: ReplicaConfig, optimizer_config: OptimizerConfig,
                 loss_kind: LossKind = "cross_entropy", source_factory=None) -> None:
        self.spec = spec
        self.config = config
        self.optimizer_config = optimizer_config
        self.loss_kind = loss_kind
        self.source_factory = source_factory

    async def fit(self, params: Parameters, train: ImageDataset, test: ImageDataset | None = None,
                  epochs: int = 1) -> tuple[Parameters, list[EpochRecord], TrainingLog]:
        shards = shard_dataset(train, self.config.replicas)
        batch = self.optimizer_config.batch
        steps = max(math.ceil(len(s) / batch) for s in shards)
        sources = self.source_factory(params) if self.source_factory is not None else None
        records: list[EpochRecord] = []
        full_log = TrainingLog()
        async with DataParallelEngine(self.spec, params, self.config, self.optimizer_config,
                                      self.loss_kind, sources) as engine:
            for epoch in range(1, epochs + 1):
                started = time.perf_counter()
                log = await engine.run(shards, steps, batch, first_step=(epoch - 1) * steps)
                wall_ms = (time.perf_counter() - started) * 1000.0
                stats = engine.transport.stats.snapshot()
                current = engine.server.params()
                test_acc = accuracy(self.spec, current, test) if test is not None else None
                records.append(EpochRecord(epoch, log.mean_loss, test_acc, wall_ms, log.mean_grad_norm,
                                           stats.message_count, stats.data_units))
                full_log.steps.extend(log.steps)
                full_log.pushes.extend(log.pushes)
                logger.info("Epoch %d (data parallel): loss=%.6f accuracy=%s max staleness=%d (%.0f ms)",
                            epoch, log.mean_loss, "n/a" if test_acc is None else f"{test_acc:.4f}",
                            log.max_staleness, wall_ms)
        return engine.server.params(), records, full_log
