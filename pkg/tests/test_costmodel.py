"""Tests for the communication cost model."""
import logging

import pytest

from shardgrad.costmodel import CostParams, cost_breakdown, sweep, validate_measured
from shardgrad.errors import ConfigError, InconsistencyError
from shardgrad.transport import MessageStats, Tag
from shardgrad.transport.base import TagCount

MNIST_NET = [784, 480, 160, 10]


def test_message_count_single_hidden_layer():
    assert cost_breakdown(CostParams(F=2, M=1, b=[784, 480, 10])).K == 5


def test_init_volume():
    assert cost_breakdown(CostParams(F=2, b=[784, 480, 10])).N1 == 789


def test_message_count_scales_with_examples():
    bd = cost_breakdown(CostParams(F=4, M=10, b=MNIST_NET))
    assert bd.K == 310
    assert isinstance(bd.K, int)


def test_volumes_for_four_workers():
    bd = cost_breakdown(CostParams(F=4, M=1, b=MNIST_NET, t_lat=1e-4, t_data=1e-8))
    assert bd.N1 == pytest.approx(2359.5)
    assert bd.N2_paper == pytest.approx(1280.0)
    assert bd.N2_measured_model == pytest.approx(1920.0)
    assert bd.N3 == pytest.approx(990.0)
    volume = 2359.5 + 1280.0 + 990.0
    assert bd.N == pytest.approx(volume / 31)
    assert bd.N_raw == pytest.approx(volume / 31)
    assert bd.T_comm == pytest.approx(31 * (1e-4 + volume / 31 * 1e-8))
    assert bd.exact_log2


def test_per_message_average_ignores_example_count():
    one = cost_breakdown(CostParams(F=4, M=1, b=MNIST_NET))
    many = cost_breakdown(CostParams(F=4, M=10, b=MNIST_NET))
    assert many.N == pytest.approx(one.N)
    assert many.N_raw == pytest.approx(one.N_raw / 10)


def test_single_worker_costs_nothing():
    bd = cost_breakdown(CostParams(F=1, M=100, b=MNIST_NET))
    assert (bd.K, bd.N1, bd.N2_paper, bd.N3, bd.N, bd.T_comm) == (0, 0, 0, 0, 0, 0)


def test_non_power_of_two_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="shardgrad.costmodel"):
        bd = cost_breakdown(CostParams(F=3, b=MNIST_NET))
    assert not bd.exact_log2
    assert bd.K > 0
    assert "not a power of two" in caplog.text


def test_sweep_rows():
    rows = sweep(CostParams(F=1, b=MNIST_NET), [1, 2, 4, 8])
    assert [r.F for r in rows] == [1, 2, 4, 8]
    assert rows[0].K == 0
    assert rows[1].K < rows[2].K < rows[3].K


@pytest.mark.parametrize("kwargs", [
    {"F": 0, "b": MNIST_NET},
    {"F": 2, "b": [784]},
    {"F": 2, "b": [784, 0, 10]},
    {"F": 2, "M": 0, "b": MNIST_NET},
])
def test_invalid_parameters(kwargs):
    with pytest.raises(ConfigError):
        CostParams(**kwargs)


# ── Reconciliation ───────────────────────────────────────────────────────────

def _stats(**tags) -> MessageStats:
    by_tag = {Tag[name]: TagCount(*counts) for name, counts in tags.items()}
    return MessageStats(sum(c.messages for c in by_tag.values()), sum(c.units for c in by_tag.values()), by_tag)


def test_validate_measured_accepts_model_traffic():
    # F=2, M=1, b=[4, 4, 2]: one init message, one hypercube round, broadcast plus partial error
    p = CostParams(F=2, b=[4, 4, 2])
    stats = _stats(INIT_DATA=(1, 5), PARTIAL_ACTIVATION=(2, 4), ERROR_BROADCAST=(1, 2), PARTIAL_ERROR=(1, 2))
    report = validate_measured(p, stats)
    assert report.passed, report.failed()


def test_validate_measured_reports_mismatch():
    p = CostParams(F=2, b=[4, 4, 2])
    stats = _stats(INIT_DATA=(1, 5), PARTIAL_ACTIVATION=(2, 6), ERROR_BROADCAST=(1, 2), PARTIAL_ERROR=(1, 2))
    report = validate_measured(p, stats)
    assert not report.passed
    assert {c.name for c in report.failed()} == {"forward_units"}


def test_inconsistent_example_count():
    with pytest.raises(InconsistencyError):
        validate_measured(CostParams(F=2, M=3, b=[4, 4, 2]), _stats(INIT_DATA=(1, 5)))


def test_foreign_traffic():
    with pytest.raises(InconsistencyError):
        validate_measured(CostParams(F=2, b=[4, 4, 2]), _stats(INIT_DATA=(1, 5), GRAD_PUSH=(1, 10)))


def test_reconciliation_needs_power_of_two():
    with pytest.raises(InconsistencyError):
        validate_measured(CostParams(F=3, b=[6, 6, 3]), _stats(INIT_DATA=(2, 14)))
