"""Delayed SGD on strongly convex quadratics, measured against its regret bounds.

The objective family is f_t(x) = (lam/2) ||x - c_t||^2 over the ball of radius
R, with centers c_t drawn uniformly from the ball of radius ``center_radius``.
A delay of tau means the gradient evaluated at x_{t-tau} is applied at step t
(a FIFO queue of length tau); the step size is zero for t <= tau and
lr_scale / sqrt(t - tau) afterwards.

Bound constants below write ``diam_bound`` for the constant whose square bounds
the Bregman divergence over the domain and ``lr_scale`` for the step-size scale.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from pydantic import Field, model_validator

from shardgrad.config import DomainConfig
from shardgrad.errors import BoundUndefinedError, RangeError, ShapeError
from shardgrad.tensor import Rng

logger = logging.getLogger(__name__)

# The delay bracket of the thm3 bound reads "[1/2 tau]" ambiguously; it is evaluated as (1/2 + tau), as in thm2.
THM3_BRACKET_AMBIGUOUS = "[1/2 tau]"
THM3_BRACKET_USED = "[1/2 + tau]"


class ConvexProblemConfig(DomainConfig):
    dim: int = Field(10, ge=1, le=1000)
    lam: float = Field(1.0, gt=0)
    radius: float = Field(2.0, gt=0)
    center_radius: float = Field(1.0, ge=0)

    @model_validator(mode="after")
    def _centers_inside(self) -> ConvexProblemConfig:
        if self.center_radius > self.radius:
            raise ValueError(f"center_radius {self.center_radius} exceeds radius {self.radius}")
        return self


class DelayConfig(DomainConfig):
    tau1: float = Field(0.0, ge=0)
    tau2: float = Field(0.0, ge=0)
    alpha1: float = Field(1.0, ge=0)
    alpha2: float = Field(1.0, ge=0)
    tau: int | None = Field(None, ge=0)


class BoundParams(DomainConfig):
    L: float = Field(gt=0)
    lam: float = Field(gt=0)
    H: float = Field(gt=0)
    diam_bound: float = Field(gt=0)
    lr_scale: float = Field(gt=0)
    T: int = Field(ge=1)

    @classmethod
    def analytic(cls, problem: ConvexProblemConfig, lr_scale: float, T: int) -> BoundParams:
        """Constants of the quadratic family: L = lam (R + r_c), H = lam, diam_bound^2 = 2 R^2."""
        return cls(L=problem.lam * (problem.radius + problem.center_radius), lam=problem.lam, H=problem.lam,
                   diam_bound=math.sqrt(2.0) * problem.radius, lr_scale=lr_scale, T=T)


# ── Elementary pieces ────────────────────────────────────────────────────────

def tau_effective(cfg: DelayConfig) -> int:
    """Weighted delay, rounded to the nearest integer with ties going up."""
    if cfg.tau is not None:
        return cfg.tau
    weight = cfg.alpha1 + cfg.alpha2
    if weight == 0:
        raise RangeError("alpha1 + alpha2 must be positive to compose delays")
    return int(math.floor((cfg.alpha1 * cfg.tau1 + cfg.alpha2 * cfg.tau2) / weight + 0.5))


def lr_at(t: int, tau: int, lr_scale: float) -> float:
    if t < 1:
        raise RangeError(f"iterations start at 1, got t={t}")
    if t <= tau:
        return 0.0
    return lr_scale / math.sqrt(t - tau)


def bregman(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"bregman: shapes {x.shape} and {y.shape} differ")
    d = x - y
    return 0.5 * float(d @ d)


def project(x: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto the ball of the given radius."""
    norm = float(np.linalg.norm(x))
    if norm <= radius:
        return x
    return x * (radius / norm)


@dataclass(frozen=True, eq=False)
class ConvexProblem:
    centers: np.ndarray
    lam: float
    radius: float
    center_radius: float

    @classmethod
    def generate(cls, config: ConvexProblemConfig, T: int, rng: Rng) -> ConvexProblem:
        """T centers drawn uniformly from the ball of radius ``center_radius``."""
        if T < 1:
            raise RangeError(f"need at least one iteration, got T={T}")
        d = config.dim
        directions = rng.normal((T, d))
        directions /= np.maximum(np.linalg.norm(directions, axis=1, keepdims=True), 1e-300)
        radii = config.center_radius * rng.uniform(0.0, 1.0, T) ** (1.0 / d)
        return cls(directions * radii[:, None], config.lam, config.radius, config.center_radius)

    @property
    def T(self) -> int:
        return len(self.centers)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def value(self, t: int, x: np.ndarray) -> float:
        """f_t(x), with t counted from 1."""
        d = x - self.centers[t - 1]
        return 0.5 * self.lam * float(d @ d)

    def gradient(self, t: int, x: np.ndarray) -> np.ndarray:
        return self.lam * (x - self.centers[t - 1])

    def comparator(self, T: int | None = None) -> np.ndarray:
        """Minimiser over the domain of the first T objectives: the projected mean center."""
        T = self.T if T is None else T
        return project(self.centers[:T].mean(axis=0), self.radius)


# ── Bounds ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Bounds:
    thm1: float
    thm2: float
    thm3: float | None


def theorem1(p: BoundParams, tau: int, T: int) -> float:
    s, L2, F2 = p.lr_scale, p.L ** 2, p.diam_bound ** 2
    root = math.sqrt(T)
    return s * L2 * root + F2 * root / s + L2 * s * tau ** 2 / 2 + 2 * L2 * s * tau * root


def theorem2(p: BoundParams, tau: int, T: int) -> float:
    return p.lam * tau * p.diam_bound ** 2 + (0.5 + tau) * (p.L ** 2 / p.lam) * (1 + tau + math.log(T))


def theorem3(p: BoundParams, tau: int, T: int) -> float:
    if tau < 1:
        raise BoundUndefinedError("the expected-regret bound needs tau >= 1 (log of zero at tau = 0)")
    lam, L2, H = p.lam, p.L ** 2, p.H
    inner = (lam * tau * p.diam_bound ** 2
             + (0.5 + tau) * (L2 / lam) * (1 + tau + math.log(3 * tau + H * tau / lam))
             + (L2 / (2 * lam)) * (1 + math.log(T))
             + math.pi ** 2 * tau ** 2 * H * L2 / (6 * lam ** 2))
    return 10.0 / 9.0 * inner


def bounds(p: BoundParams, tau: int, T: int | None = None) -> Bounds:
    """All three bounds; ``thm3`` is None at tau = 0, where it is undefined."""
    T = p.T if T is None else T
    if tau < 0:
        raise RangeError(f"tau must be >= 0, got {tau}")
    if T <= tau:
        raise RangeError(f"need T > tau, got T={T}, tau={tau}")
    thm3 = theorem3(p, tau, T) if tau >= 1 else None
    return Bounds(theorem1(p, tau, T), theorem2(p, tau, T), thm3)


# ── Runs ─────────────────────────────────────────────────────────────────────

@dataclass
class RegretReport:
    tau: int
    T: int
    trajectory: np.ndarray
    learning_rates: np.ndarray
    regret: float
    bounds: Bounds
    metadata: dict[str, str] = field(default_factory=lambda: {
        "thm3_bracket_ambiguous": THM3_BRACKET_AMBIGUOUS,
        "thm3_bracket_used": THM3_BRACKET_USED,
    })


def regret_of(trajectory: np.ndarray, problem: ConvexProblem) -> float:
    """Sum of f_t(x_t) - f_t(x*) over the first len(trajectory) objectives."""
    trajectory = np.asarray(trajectory, dtype=np.float64)
    T = len(trajectory)
    if T == 0 or T > problem.T or trajectory.shape[1] != problem.dim:
        raise ShapeError(f"trajectory of shape {trajectory.shape} does not fit {problem.T} objectives "
                         f"in dimension {problem.dim}")
    centers = problem.centers[:T]
    best = problem.comparator(T)
    played = np.sum((trajectory - centers) ** 2, axis=1)
    reference = np.sum((best - centers) ** 2, axis=1)
    return float(0.5 * problem.lam * np.sum(played - reference))


def _descend(problem: ConvexProblem, tau: int, lr_scale: float, T: int,
             x0: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    if T > problem.T:
        raise ShapeError(f"problem has {problem.T} objectives, run asks for {T}")
    x = np.zeros(problem.dim) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    trajectory = np.empty((T, problem.dim))
    rates = np.empty(T)
    queue: deque[np.ndarray] = deque()
    for t in range(1, T + 1):
        trajectory[t - 1] = x
        queue.append(problem.gradient(t, x))
        eta = lr_at(t, tau, lr_scale)
        rates[t - 1] = eta
        if len(queue) > tau:
            g = queue.popleft()
            x = project(x - eta * g, problem.radius)
    return trajectory, rates


def run_delayed_sgd(problem: ConvexProblem, tau: int, bound_params: BoundParams, T: int | None = None,
                    x0: np.ndarray | None = None) -> RegretReport:
    T = bound_params.T if T is None else T
    if tau < 0:
        raise RangeError(f"tau must be >= 0, got {tau}")
    if T <= tau:
        raise RangeError(f"need T > tau, got T={T}, tau={tau}")
    trajectory, rates = _descend(problem, tau, bound_params.lr_scale, T, x0)
    regret = regret_of(trajectory, problem)
    report = RegretReport(tau, T, trajectory, rates, regret, bounds(bound_params, tau, T))
    logger.debug("Delayed SGD tau=%d T=%d: regret %.4f (thm2 %.1f)", tau, T, regret, report.bounds.thm2)
    return report


def run_sgd(problem: ConvexProblem, lr_scale: float, T: int, x0: np.ndarray | None = None) -> np.ndarray:
    """Undelayed projected SGD with step lr_scale / sqrt(t); returns the trajectory."""
    x = np.zeros(problem.dim) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    trajectory = np.empty((T, problem.dim))
    for t in range(1, T + 1):
        trajectory[t - 1] = x
        x = project(x - lr_at(t, 0, lr_scale) * problem.gradient(t, x), problem.radius)
    return trajectory


@dataclass
class RegretRow:
    """One delay value summarised over seeds."""

    tau: int
    T: int
    regret: float
    regret_max: float
    runs: list[float]
    bounds: Bounds


def experiment(config: ConvexProblemConfig, taus, T: int, seeds: int = 5, lr_scale: float = 0.5,
               base_seed: int = 0) -> list[RegretRow]:
    """Run every delay on ``seeds`` problems; row regret is the mean over seeds."""
    params = BoundParams.analytic(config, lr_scale, T)
    problems = [ConvexProblem.generate(config, T, Rng(base_seed + s)) for s in range(seeds)]
    rows = []
    for tau in taus:
        runs = [run_delayed_sgd(problem, tau, params).regret for problem in problems]
        row = RegretRow(tau, T, float(np.mean(runs)), float(np.max(runs)), runs, bounds(params, tau, T))
        logger.info("tau=%d T=%d: mean regret %.4f (max %.4f), thm2 bound %.2f", tau, T, row.regret,
                    row.regret_max, row.bounds.thm2)
        rows.append(row)
    return rows
