"""Self-checks run by ``shardgrad verify``.

Each suite returns ``Check`` rows (expected vs measured, pass/fail). ``quick``
shrinks the grids so the whole run takes seconds; ``grad_error`` perturbs the
distributed gradients before comparison so the failure path can be exercised.
"""
from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass

import numpy as np

from shardgrad.costmodel import Check, CostParams, validate_measured
from shardgrad.data_io import ImageDataset
from shardgrad.data_parallel import ReplicaConfig, replica_batch, run_data_parallel
from shardgrad.model_parallel import ModelParallelEngine, MpConfig
from shardgrad.network import (
    Conv2D, Gradients, MeanPool, NetworkSpec, Parameters, SoftmaxOutput,
    backward, fc_spec, forward, gradient_check, init_params, lstm_spec, rnn_spec,
)
from shardgrad.optim import Optimizer, OptimizerConfig
from shardgrad.regret_lab import (
    BoundParams, ConvexProblem, ConvexProblemConfig, experiment, regret_of, run_delayed_sgd, run_sgd,
)
from shardgrad.tensor import Rng
from shardgrad.training import batch_gradients

logger = logging.getLogger(__name__)

EQUIVALENCE_TOL = 1e-10
FD_TOL = 1e-5


@dataclass(frozen=True)
class SuiteResult:
    suite: str
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _at_most(name: str, limit: float, measured: float) -> Check:
    return Check(name, limit, measured, measured <= limit)


def _one_hot_rows(rng: Rng, count: int, classes: int) -> np.ndarray:
    out = np.zeros((count, classes))
    out[np.arange(count), rng.integers(0, classes, count)] = 1.0
    return out


# ── Model-parallel gradient equivalence ──────────────────────────────────────

def _reference_sum(spec: NetworkSpec, params: Parameters, xs, ys) -> Gradients:
    total = Gradients.zeros_for(params)
    for x, y in zip(xs, ys):
        grads, _ = backward(spec, params, forward(spec, params, x), y)
        total.accumulate(grads)
    return total


async def _distributed_sum(spec, params, xs, ys, F: int, exchange: str, seed: int) -> Gradients:
    config = MpConfig(workers=F, exchange=exchange, deterministic=True, seed=seed)
    async with ModelParallelEngine(spec, params, config) as engine:
        for x, y in zip(xs, ys):
            await engine.forward_backward(x, y, commit=0)
        return await engine.gather_gradients(clear=True)


async def gradient_equivalence(quick: bool = False, grad_error: float = 0.0, seed: int = 0) -> SuiteResult:
    sizes = [24, 16, 8, 8] if quick else [784, 480, 160, 10]
    count = 4 if quick else 32
    f_values = [1, 2, 4] if quick else [1, 2, 4, 8]
    rng = Rng(seed)
    spec = fc_spec(sizes)
    params = init_params(spec, rng)
    xs = rng.uniform(0.0, 1.0, count * sizes[0]).reshape(count, sizes[0])
    ys = _one_hot_rows(rng, count, sizes[-1])
    reference = _reference_sum(spec, params, xs, ys)

    checks = []
    for exchange in ("hypercube", "master_relay"):
        for F in f_values:
            grads = await _distributed_sum(spec, params, xs, ys, F, exchange, seed)
            if grad_error:
                grads.layers[0]["W"].flat[0] += grad_error
            name = f"F={F}/{exchange}"
            if F == 1:
                checks.append(Check(f"{name}/bit_exact", 1.0, float(grads.equals(reference)),
                                    grads.equals(reference)))
            else:
                checks.append(_at_most(f"{name}/max_rel_error", EQUIVALENCE_TOL,
                                       grads.max_relative_error(reference)))
    return SuiteResult("gradient_equivalence", checks)


# ── Finite differences ───────────────────────────────────────────────────────

def finite_differences(seed: int = 0) -> SuiteResult:
    rng = Rng(seed)
    checks = []

    dense = fc_spec([6, 5, 4, 3])
    x = rng.uniform(0.0, 1.0, 6)
    checks.append(("dense", dense, init_params(dense, rng), x, _one_hot_rows(rng, 1, 3)[0], None))

    cnn = NetworkSpec(layers=(Conv2D(3, 3, 2), MeanPool(2, 2), SoftmaxOutput(3)), input_shape=(1, 8, 8))
    image = rng.uniform(0.0, 1.0, 64).reshape(1, 8, 8)
    checks.append(("cnn", cnn, init_params(cnn, rng), image, _one_hot_rows(rng, 1, 3)[0], None))

    vocab, steps = 4, 5
    seq = _one_hot_rows(rng, steps, vocab)
    tgt = _one_hot_rows(rng, steps, vocab)
    mask = np.array([1.0, 1.0, 1.0, 1.0, 0.0])
    for kind, spec in (("rnn", rnn_spec(vocab, (5,))), ("lstm", lstm_spec(vocab, (4, 3)))):
        checks.append((kind, spec, init_params(spec, rng), seq, tgt, mask))

    results = []
    for name, spec, params, inp, target, msk in checks:
        report = gradient_check(spec, params, inp, target, mask=msk)
        results.append(_at_most(f"{name}/max_rel_error", FD_TOL, report.max_relative_error))
    return SuiteResult("finite_differences", results)


# ── Traffic reconciliation ───────────────────────────────────────────────────

LAYOUTS = {3: [16, 16, 8], 4: [16, 16, 16, 8], 5: [16, 16, 16, 8, 8]}


async def reconciliation(quick: bool = False, seed: int = 0) -> SuiteResult:
    grid_f = [2, 4] if quick else [2, 4, 8]
    grid_n = [3, 4] if quick else [3, 4, 5]
    grid_m = [1, 2] if quick else [1, 8]
    rng = Rng(seed)
    checks = []
    for n in grid_n:
        sizes = LAYOUTS[n]
        spec = fc_spec(sizes)
        params = init_params(spec, rng)
        for F in grid_f:
            for M in grid_m:
                xs = rng.uniform(0.0, 1.0, M * sizes[0]).reshape(M, sizes[0])
                ys = _one_hot_rows(rng, M, sizes[-1])
                config = MpConfig(workers=F, deterministic=True, seed=seed)
                async with ModelParallelEngine(spec, params, config) as engine:
                    _, stats = await engine.train_batch(xs, ys)
                report = validate_measured(CostParams(F=F, M=M, b=sizes), stats)
                checks += [Check(f"F={F}/n={n}/M={M}/{c.name}", c.expected, c.measured, c.passed)
                           for c in report.checks]
    return SuiteResult("reconciliation", checks)


# ── Degenerate asynchrony ────────────────────────────────────────────────────

async def degenerate_asynchrony(quick: bool = False, seed: int = 0) -> SuiteResult:
    steps = 20 if quick else 100
    rng = Rng(seed)
    spec = fc_spec([12, 10, 10])
    params = init_params(spec, rng)
    images = rng.uniform(0.0, 1.0, 40 * 12).reshape(40, 12)
    data = ImageDataset(images, rng.integers(0, 10, 40), rows=3, cols=4)
    opt_config = OptimizerConfig(kind="momentum", lr=0.1, batch=8)

    reference = params.copy()
    optimizer = Optimizer(opt_config)
    for step in range(steps):
        grads, _, _ = batch_gradients(spec, reference, *replica_batch(data, opt_config.batch, step))
        optimizer.apply(reference, grads)

    final, _ = await run_data_parallel(spec, params, data, ReplicaConfig(deterministic=True), opt_config, steps)
    same = final.equals(reference)
    return SuiteResult("asynchrony", [Check(f"1 replica/{steps} steps/bit_exact", 1.0, float(same), same)])


# ── Regret bounds ────────────────────────────────────────────────────────────

def regret_bounds(quick: bool = False, seed: int = 0) -> SuiteResult:
    T = 2_000 if quick else 10_000
    seeds = 2 if quick else 5
    taus = [1, 5] if quick else [1, 2, 5, 10]
    config = ConvexProblemConfig(dim=10, lam=1.0, radius=2.0, center_radius=1.0)
    checks = []
    for row in experiment(config, taus, T, seeds=seeds, base_seed=seed):
        checks.append(_at_most(f"tau={row.tau}/regret<=thm2", row.bounds.thm2, row.regret_max))
        checks.append(_at_most(f"tau={row.tau}/regret<=thm3", row.bounds.thm3, row.regret_max))

    problem = ConvexProblem.generate(config, T, Rng(seed))
    params = BoundParams.analytic(config, 0.5, T)
    for tau in taus:
        trajectory = run_delayed_sgd(problem, tau, params).trajectory
        early = T // 10
        late_rate = regret_of(trajectory, problem) / T
        early_rate = regret_of(trajectory[:early], problem) / early
        checks.append(Check(f"tau={tau}/sublinear", early_rate, late_rate, late_rate < early_rate))

    undelayed = run_sgd(problem, 0.5, T)
    same = np.array_equal(run_delayed_sgd(problem, 0, params).trajectory, undelayed)
    checks.append(Check("tau=0/matches_sgd", 1.0, float(same), same))
    return SuiteResult("regret", checks)


async def run_all(quick: bool = False, grad_error: float = 0.0, seed: int = 0) -> list[SuiteResult]:
    loop = asyncio.get_running_loop()
    results = [await gradient_equivalence(quick, grad_error, seed)]
    results.append(await loop.run_in_executor(None, finite_differences, seed))
    results.append(await reconciliation(quick, seed))
    results.append(await degenerate_asynchrony(quick, seed))
    results.append(await loop.run_in_executor(None, regret_bounds, quick, seed))
    for suite in results:
        logger.info("Suite %s: %s", suite.suite, "PASS" if suite.passed else "FAIL")
    return results
