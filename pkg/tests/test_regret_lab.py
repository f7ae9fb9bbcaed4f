"""Tests for delayed SGD and its regret bounds."""
import math

import numpy as np
import pytest

from shardgrad.errors import BoundUndefinedError, ConfigError, RangeError, ShapeError
from shardgrad.regret_lab import (
    THM3_BRACKET_AMBIGUOUS, THM3_BRACKET_USED, BoundParams, ConvexProblem, ConvexProblemConfig, DelayConfig, bounds,
    bregman, experiment, lr_at, project, regret_of, run_delayed_sgd, run_sgd, tau_effective, theorem1, theorem2,
    theorem3,
)
from shardgrad.tensor import Rng


@pytest.fixture
def problem_config():
    return ConvexProblemConfig(dim=10, lam=1.0, radius=2.0, center_radius=1.0)


@pytest.fixture
def problem(problem_config):
    return ConvexProblem.generate(problem_config, 2000, Rng(0))


# ── Delays and step sizes ────────────────────────────────────────────────────

@pytest.mark.parametrize("cfg,expected", [
    (DelayConfig(tau1=3, tau2=3), 3),
    (DelayConfig(tau1=3, tau2=6, alpha1=2, alpha2=1), 4),
    (DelayConfig(tau1=7, tau2=7, alpha1=0.3, alpha2=5), 7),
    (DelayConfig(tau1=1, tau2=2), 2),
    (DelayConfig(tau1=9, tau2=9, tau=2), 2),
])
def test_tau_effective(cfg, expected):
    assert tau_effective(cfg) == expected


def test_tau_effective_needs_weight():
    with pytest.raises(RangeError):
        tau_effective(DelayConfig(tau1=1, tau2=2, alpha1=0, alpha2=0))


def test_lr_schedule():
    assert lr_at(5, 5, 0.2) == 0.0
    assert lr_at(3, 5, 0.2) == 0.0
    assert lr_at(6, 5, 0.2) == pytest.approx(0.2)
    assert lr_at(9, 5, 0.2) == pytest.approx(0.1)
    with pytest.raises(RangeError):
        lr_at(0, 0, 0.2)


def test_bregman():
    assert bregman([1.0, 0.0], [0.0, 0.0]) == 0.5
    assert bregman([2.0, -1.0], [2.0, -1.0]) == 0.0
    assert bregman([1.0, 3.0], [0.5, -2.0]) == bregman([0.5, -2.0], [1.0, 3.0])
    with pytest.raises(ShapeError):
        bregman([1.0], [1.0, 2.0])


def test_project_onto_ball():
    assert np.array_equal(project(np.array([0.5, 0.5]), 2.0), np.array([0.5, 0.5]))
    assert np.allclose(project(np.array([3.0, 4.0]), 2.0), [1.2, 1.6])


def test_problem_config_validation():
    with pytest.raises(ConfigError):
        ConvexProblemConfig(radius=1.0, center_radius=2.0)
    with pytest.raises(ConfigError):
        ConvexProblemConfig(lam=0.0)


# ── Problems and regret ──────────────────────────────────────────────────────

def test_generated_centers_stay_in_radius(problem):
    assert problem.T == 2000
    assert problem.dim == 10
    assert np.linalg.norm(problem.centers, axis=1).max() <= 1.0 + 1e-12


def test_comparator_is_projected_mean():
    centers = np.array([[3.0, 0.0], [3.0, 0.0]])
    problem = ConvexProblem(centers, lam=1.0, radius=2.0, center_radius=2.0)
    assert np.allclose(problem.comparator(), [2.0, 0.0])


def test_regret_of_comparator_is_zero(problem):
    best = np.tile(problem.comparator(100), (100, 1))
    assert regret_of(best, problem) == pytest.approx(0.0, abs=1e-9)


def test_single_step_regret(problem):
    x = np.full((1, 10), 0.3)
    c = problem.centers[0]
    # with one objective the comparator is c_1 itself
    expected = 0.5 * problem.lam * float((x[0] - c) @ (x[0] - c))
    assert regret_of(x, problem) == pytest.approx(expected)


def test_comparator_beats_grid_search():
    config = ConvexProblemConfig(dim=2, lam=1.5, radius=1.0, center_radius=1.0)
    problem = ConvexProblem.generate(config, 50, Rng(4))
    axis = np.linspace(-1.0, 1.0, 201)
    grid = np.array([(a, b) for a in axis for b in axis if a * a + b * b <= 1.0])
    totals = ((grid[:, None, :] - problem.centers[None, :, :]) ** 2).sum(axis=(1, 2))
    best = problem.comparator()
    best_total = float(((best - problem.centers) ** 2).sum())
    assert best_total <= totals.min() + 1e-9


def test_regret_of_rejects_bad_trajectory(problem):
    with pytest.raises(ShapeError):
        regret_of(np.zeros((problem.T + 1, 10)), problem)
    with pytest.raises(ShapeError):
        regret_of(np.zeros((5, 3)), problem)


# ── Delayed SGD ──────────────────────────────────────────────────────────────

def test_zero_delay_matches_plain_sgd(problem, problem_config):
    params = BoundParams.analytic(problem_config, 0.5, 2000)
    delayed = run_delayed_sgd(problem, 0, params)
    assert np.array_equal(delayed.trajectory, run_sgd(problem, 0.5, 2000))


def test_fixed_center_converges(problem_config):
    c = np.array([0.3, -0.2] + [0.0] * 8)
    T = 10_000
    problem = ConvexProblem(np.tile(c, (T, 1)), lam=1.0, radius=2.0, center_radius=1.0)
    report = run_delayed_sgd(problem, 0, BoundParams.analytic(problem_config, 0.5, T))
    assert np.linalg.norm(report.trajectory[-1] - c) <= 1e-3


def test_delayed_run_stays_in_domain(problem, problem_config):
    report = run_delayed_sgd(problem, 10, BoundParams.analytic(problem_config, 0.5, 2000))
    assert np.linalg.norm(report.trajectory, axis=1).max() <= 2.0 + 1e-12
    assert not report.learning_rates[:10].any()
    assert report.learning_rates[10] == pytest.approx(0.5)
    assert report.metadata == {"thm3_bracket_ambiguous": THM3_BRACKET_AMBIGUOUS,
                               "thm3_bracket_used": THM3_BRACKET_USED}


def test_regret_is_sublinear(problem_config):
    T = 10_000
    problem = ConvexProblem.generate(problem_config, T, Rng(1))
    trajectory = run_delayed_sgd(problem, 5, BoundParams.analytic(problem_config, 0.5, T)).trajectory
    half = T // 2
    assert regret_of(trajectory, problem) / T < regret_of(trajectory[:half], problem) / half


def test_delay_must_be_shorter_than_run(problem, problem_config):
    params = BoundParams.analytic(problem_config, 0.5, 2000)
    with pytest.raises(RangeError):
        run_delayed_sgd(problem, 10, params, T=10)
    with pytest.raises(RangeError):
        run_delayed_sgd(problem, -1, params)


# ── Bounds ───────────────────────────────────────────────────────────────────

def test_analytic_constants(problem_config):
    p = BoundParams.analytic(problem_config, 0.5, 100)
    assert p.L == pytest.approx(3.0)
    assert p.H == 1.0
    assert p.diam_bound ** 2 == pytest.approx(8.0)


def test_zero_delay_bounds(problem_config):
    p = BoundParams.analytic(problem_config, 0.5, 10_000)
    b = bounds(p, 0)
    root = math.sqrt(10_000)
    assert b.thm1 == pytest.approx(0.5 * 9.0 * root + 8.0 * root / 0.5)
    assert b.thm2 == pytest.approx(0.5 * 9.0 * (1 + math.log(10_000)))
    assert b.thm3 is None
    with pytest.raises(BoundUndefinedError):
        theorem3(p, 0, 10_000)


def test_bounds_grow_with_delay(problem_config):
    p = BoundParams.analytic(problem_config, 0.5, 10_000)
    thm2 = [theorem2(p, tau, 10_000) for tau in range(1, 11)]
    thm3 = [theorem3(p, tau, 10_000) for tau in range(1, 11)]
    assert all(a < b for a, b in zip(thm2, thm2[1:]))
    assert all(a < b for a, b in zip(thm3, thm3[1:]))
    assert theorem1(p, 2, 10_000) > theorem1(p, 1, 10_000)


def test_theorem3_at_unit_delay():
    p = BoundParams(L=2.0, lam=1.0, H=1.0, diam_bound=2.0, lr_scale=0.5, T=10_000)
    value = theorem3(p, 1, 10_000)
    assert math.isfinite(value)
    assert value > 0.0


def test_bounds_need_run_longer_than_delay(problem_config):
    p = BoundParams.analytic(problem_config, 0.5, 10)
    with pytest.raises(RangeError):
        bounds(p, 10)


def test_measured_regret_within_bounds(problem_config):
    rows = experiment(problem_config, [1, 5], 2000, seeds=2)
    for row in rows:
        assert len(row.runs) == 2
        assert row.regret_max <= row.bounds.thm2
        assert row.regret_max <= row.bounds.thm3


def test_experiment_is_seeded(problem_config):
    first = experiment(problem_config, [2], 500, seeds=2, base_seed=7)
    second = experiment(problem_config, [2], 500, seeds=2, base_seed=7)
    assert first[0].runs == second[0].runs
