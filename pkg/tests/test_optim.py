"""Tests for shardgrad.optim."""
import numpy as np
import pytest

from shardgrad.config import RunConfig
from shardgrad.errors import ConfigError
from shardgrad.network import Parameters
from shardgrad.optim import Optimizer, OptimizerConfig


def _step(kind: str, steps: int = 1, **kwargs) -> float:
    optimizer = Optimizer(OptimizerConfig(kind=kind, **kwargs))
    w = np.array([1.0])
    for _ in range(steps):
        optimizer.update("w", w, np.array([0.5]), 0.1)
    return float(w[0])


def test_sgd_step():
    assert _step("sgd") == pytest.approx(0.95)


def test_momentum_accumulates_velocity():
    assert _step("momentum", momentum=0.9) == pytest.approx(0.95)
    # v2 = 0.9 * -0.05 - 0.05
    assert _step("momentum", steps=2, momentum=0.9) == pytest.approx(0.855)


def test_rmsprop_first_step():
    assert _step("rmsprop", rho=0.9) == pytest.approx(1.0 - 0.31623, abs=1e-5)


def test_inv_sqrt_schedule():
    optimizer = Optimizer(OptimizerConfig(lr=0.2, schedule="inv_sqrt"))
    assert optimizer.learning_rate(1) == pytest.approx(0.2)
    assert optimizer.learning_rate(4) == pytest.approx(0.1)


def test_apply_updates_every_array_and_counts_steps():
    params = Parameters([{"W": np.ones((2, 2)), "b": np.zeros(2)}])
    grads = Parameters([{"W": np.full((2, 2), 0.5), "b": np.ones(2)}])
    optimizer = Optimizer(OptimizerConfig(lr=0.1))
    assert optimizer.apply(params, grads) == pytest.approx(0.1)
    assert np.allclose(params.layers[0]["W"], 0.95)
    assert np.allclose(params.layers[0]["b"], -0.1)
    assert optimizer.steps == 1


def test_state_is_kept_per_array_name():
    optimizer = Optimizer(OptimizerConfig(kind="momentum"))
    a, b = np.array([1.0]), np.array([1.0])
    optimizer.update("a", a, np.array([1.0]), 0.1)
    optimizer.update("b", b, np.array([1.0]), 0.1)
    assert a[0] == b[0]
    assert set(optimizer.state_dict()) == {"a", "b"}


def test_invalid_constants_raise_config_error():
    with pytest.raises(ConfigError):
        OptimizerConfig(lr=0.0)
    with pytest.raises(ConfigError):
        OptimizerConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        OptimizerConfig(kind="adam")


def test_from_run_config():
    cfg = RunConfig(optimizer="rmsprop", lr=0.01, batch=32)
    opt = OptimizerConfig.from_run(cfg)
    assert opt.kind == "rmsprop"
    assert opt.lr == 0.01
    assert opt.batch == 32
