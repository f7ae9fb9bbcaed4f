"""Tests for the parameter server and data-parallel replicas."""
import asyncio

import numpy as np
import pytest

from shardgrad.data_parallel import (
    DataParallelEngine, DataParallelTrainer, GradientSource, LocalGradientSource, ModelParallelGradientSource,
    SERVER, ParameterServer, ReplicaConfig, TurnScheduler, ps_pull, ps_push_apply, replica_batch, replica_run,
    run_data_parallel, shard_dataset,
)
from shardgrad.errors import GradientRejectedError, InfeasiblePartitionError, NumericError, ShapeError
from shardgrad.model_parallel import MpConfig
from shardgrad.network import Gradients, fc_spec, init_params
from shardgrad.optim import Optimizer, OptimizerConfig
from shardgrad.tensor import Rng
from shardgrad.training import batch_gradients
from shardgrad.transport import InProcTransport, Tag


@pytest.fixture
def dp_spec():
    return fc_spec([12, 8, 10])


@pytest.fixture
def dp_params(dp_spec):
    return init_params(dp_spec, Rng(3))


def _ones_like(params):
    grads = Gradients.zeros_for(params)
    for _, _, arr in grads.items():
        arr += 1.0
    return grads


# ── Parameter server ─────────────────────────────────────────────────────────

def test_push_apply_versions_and_staleness(dp_params):
    server = ParameterServer(dp_params, OptimizerConfig(lr=0.1))
    assert ps_push_apply(server, _ones_like(dp_params)) == 1
    assert ps_push_apply(server, _ones_like(dp_params), computed_at=0) == 2
    assert [p.staleness for p in server.pushes] == [0, 1]
    params, version = ps_pull(server)
    assert version == 2
    assert np.allclose(params.layers[0]["W"], dp_params.layers[0]["W"] - 0.2)


def test_push_records_gradient_norm(dp_params):
    server = ParameterServer(dp_params, OptimizerConfig(lr=0.1))
    ps_push_apply(server, _ones_like(dp_params))
    size = dp_params.flatten().size
    assert size == 12 * 8 + 8 + 8 * 10 + 10
    assert server.pushes[0].grad_norm == pytest.approx(np.sqrt(size))


def test_pull_returns_a_snapshot(dp_params):
    server = ParameterServer(dp_params, OptimizerConfig())
    params, _ = server.pull()
    params.layers[0]["W"][:] = 0.0
    assert server.params().equals(dp_params)


def test_nonfinite_push_is_rejected(dp_params):
    server = ParameterServer(dp_params, OptimizerConfig())
    bad = _ones_like(dp_params)
    bad.layers[1]["b"][0] = np.inf
    with pytest.raises(GradientRejectedError):
        server.push_apply(bad)
    assert server.version == 0
    assert server.rejected == 1
    assert server.params().equals(dp_params)


def test_mismatched_push_shape(dp_params):
    server = ParameterServer(dp_params, OptimizerConfig())
    wrong = init_params(fc_spec([12, 6, 10]), Rng(0))
    with pytest.raises(ShapeError):
        server.push_apply(wrong)


def test_nonfinite_initial_parameters(dp_params):
    poisoned = dp_params.copy()
    poisoned.layers[0]["W"][0, 0] = np.nan
    with pytest.raises(NumericError):
        ParameterServer(poisoned, OptimizerConfig())


# ── Sharding and batches ─────────────────────────────────────────────────────

def test_shards_are_contiguous_and_cover(tiny_images):
    shards = shard_dataset(tiny_images, 3)
    assert [len(s) for s in shards] == [14, 13, 13]
    assert np.array_equal(np.concatenate([s.images for s in shards]), tiny_images.images)
    with pytest.raises(InfeasiblePartitionError):
        shard_dataset(tiny_images, 41)


def test_replica_batch_wraps_around(tiny_images):
    inputs, targets, mask = replica_batch(tiny_images, 16, 2)
    expected = np.r_[32:40, 0:8]
    assert np.array_equal(inputs, tiny_images.images[expected])
    assert np.array_equal(targets.argmax(axis=1), tiny_images.labels[expected])
    assert mask.sum() == 16


async def test_turn_scheduler_round_robin():
    scheduler = TurnScheduler([1, 2, 3])
    order = []

    async def replica(r, turns):
        for _ in range(turns):
            async with scheduler.turn(r):
                order.append(r)
                await asyncio.sleep(0)
        await scheduler.finish(r)

    await asyncio.gather(replica(3, 2), replica(1, 2), replica(2, 1))
    assert order == [1, 2, 3, 1, 3]


# ── Runs ─────────────────────────────────────────────────────────────────────

async def test_single_replica_matches_synchronous_training(dp_spec, dp_params, tiny_images):
    opt_config = OptimizerConfig(kind="momentum", lr=0.1, batch=8)
    reference = dp_params.copy()
    optimizer = Optimizer(opt_config)
    for step in range(12):
        grads, _, _ = batch_gradients(dp_spec, reference, *replica_batch(tiny_images, 8, step))
        optimizer.apply(reference, grads)

    final, log = await run_data_parallel(dp_spec, dp_params, tiny_images, ReplicaConfig(deterministic=True),
                                         opt_config, steps=12)
    assert final.equals(reference)
    assert log.max_staleness == 0
    assert len(log.steps) == 12


async def test_push_window_sums_gradients(dp_spec, dp_params, tiny_images):
    config = ReplicaConfig(n_push=3, deterministic=True)
    _, log = await run_data_parallel(dp_spec, dp_params, tiny_images, config, OptimizerConfig(batch=8), steps=7)
    assert [s.step for s in log.steps if s.pushed] == [2, 5, 6]
    assert [p.version for p in log.pushes] == [1, 2, 3]


async def test_fetch_interval_creates_staleness(dp_spec, dp_params, tiny_images):
    config = ReplicaConfig(n_fetch=2, deterministic=True)
    _, log = await run_data_parallel(dp_spec, dp_params, tiny_images, config, OptimizerConfig(batch=8), steps=4)
    assert [p.staleness for p in log.pushes] == [0, 1, 0, 1]
    assert [s.params_version for s in log.steps] == [0, 0, 2, 2]


async def test_two_replicas_staleness_histogram(dp_spec, dp_params, tiny_images):
    config = ReplicaConfig(replicas=2, n_fetch=3, deterministic=True)
    _, log = await run_data_parallel(dp_spec, dp_params, tiny_images, config, OptimizerConfig(batch=4), steps=3)
    assert log.staleness_histogram == {0: 2, 2: 2, 4: 2}
    assert [p.replica for p in log.pushes] == [1, 2, 1, 2, 1, 2]
    assert len(log.for_replica(2)) == 3


@pytest.mark.parametrize("replicas", [2, 3])
@pytest.mark.parametrize("n_fetch", [1, 4])
async def test_push_window_staleness_is_bounded(dp_spec, dp_params, tiny_images, replicas, n_fetch):
    config = ReplicaConfig(replicas=replicas, n_fetch=n_fetch, n_push=4, deterministic=True)
    _, log = await run_data_parallel(dp_spec, dp_params, tiny_images, config, OptimizerConfig(batch=4), steps=12)
    assert len(log.pushes) == 3 * replicas
    # each other replica pushes once per window, in turn order
    assert log.staleness_histogram == {k: 3 for k in range(replicas)}
    assert log.max_staleness <= (replicas - 1) * 4 + 3


async def test_deterministic_runs_repeat(dp_spec, dp_params, tiny_images):
    config = ReplicaConfig(replicas=3, deterministic=True)
    first, _ = await run_data_parallel(dp_spec, dp_params, tiny_images, config, OptimizerConfig(batch=4), steps=5)
    second, _ = await run_data_parallel(dp_spec, dp_params, tiny_images, config, OptimizerConfig(batch=4), steps=5)
    assert first.equals(second)


async def test_free_running_replicas_finish(dp_spec, dp_params, tiny_images):
    config = ReplicaConfig(replicas=3)
    final, log = await run_data_parallel(dp_spec, dp_params, tiny_images, config, OptimizerConfig(batch=4), steps=5)
    assert len(log.pushes) == 15
    assert final.is_finite()
    assert np.isfinite(log.mean_loss)


class _PoisonedSource(GradientSource):
    def __init__(self, spec):
        self.inner = LocalGradientSource(spec, offload=False)

    async def gradients(self, params, version, inputs, targets, mask):
        grads, value = await self.inner.gradients(params, version, inputs, targets, mask)
        if version >= 2:
            grads.layers[0]["W"][0, 0] = np.nan
        return grads, value


async def test_rejected_push_fails_the_run(dp_spec, dp_params, tiny_images):
    config = ReplicaConfig(deterministic=True)
    async with DataParallelEngine(dp_spec, dp_params, config, OptimizerConfig(batch=8),
                                  sources=[_PoisonedSource(dp_spec)]) as engine:
        with pytest.raises(GradientRejectedError):
            await engine.run(shard_dataset(tiny_images, 1), steps=5, batch_size=8)
    assert engine.server.version == 2
    assert engine.server.rejected == 1


def test_source_count_must_match(dp_spec, dp_params):
    with pytest.raises(ShapeError):
        DataParallelEngine(dp_spec, dp_params, ReplicaConfig(replicas=2), sources=[LocalGradientSource(dp_spec)])


async def test_hybrid_replica_matches_local(dp_spec, dp_params, tiny_images):
    opt_config = OptimizerConfig(lr=0.2, batch=8)
    config = ReplicaConfig(deterministic=True)
    local, _ = await run_data_parallel(dp_spec, dp_params, tiny_images, config, opt_config, steps=4)
    sources = [ModelParallelGradientSource(dp_spec, dp_params, MpConfig(workers=2, deterministic=True), opt_config)]
    hybrid, _ = await run_data_parallel(dp_spec, dp_params, tiny_images, config, opt_config, steps=4,
                                        sources=sources)
    assert hybrid.max_relative_error(local) <= 1e-10


async def test_trainer_epochs(dp_spec, dp_params, tiny_images):
    trainer = DataParallelTrainer(dp_spec, ReplicaConfig(replicas=2, deterministic=True), OptimizerConfig(batch=8))
    final, records, log = await trainer.fit(dp_params, tiny_images, tiny_images, epochs=2)
    # 20 samples per shard at batch 8: 3 steps per replica per epoch
    assert len(log.pushes) == 12
    assert [r.epoch for r in records] == [1, 2]
    assert all(r.messages > 0 for r in records)
    assert all(r.grad_norm > 0.0 for r in records)
    assert records[1].grad_norm == pytest.approx(float(np.mean([p.grad_norm for p in log.pushes[6:]])))
    assert final.is_finite()


async def test_replica_run_against_served_parameter_server(dp_spec, dp_params, tiny_images):
    server = ParameterServer(dp_params, OptimizerConfig(lr=0.1))
    source = LocalGradientSource(dp_spec, offload=False)
    async with InProcTransport(2) as transport:
        serving = asyncio.create_task(server.serve(transport.endpoint(SERVER), 1))
        records = await replica_run(1, transport.endpoint(1), ReplicaConfig(n_push=2), source, tiny_images,
                                    5, 8, server.params())
        await asyncio.wait_for(serving, 5)
    assert [r.pushed for r in records] == [False, True, False, True, True]
    assert [r.server_version for r in records if r.pushed] == [1, 2, 3]
    assert server.version == 3
    stats = transport.stats.snapshot()
    assert stats.messages(Tag.GRAD_PUSH) == 3
    assert stats.messages(Tag.PARAM_PULL) == 5
    assert stats.messages(Tag.SHUTDOWN) == 1
