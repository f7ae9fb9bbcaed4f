"""Communication cost of model-parallel training, analytic and measured.

Per epoch of M examples on F workers with layer sizes b_0..b_{n-1}:

    K  = M [(F-1) + sum_{i=1}^{n-2} (F log2 F + 2(F-1))]
    N1 = (F-1) (b_0 + b_{n-1}/F)                         init, per example
    N2 = sum_{i=1}^{n-2} F log2 F (b_i/F)                 forward, as published
    N3 = sum_{i=1}^{n-2} [(F-1) b_{i+1} + (F-1) b_i/F]    backward, per example
    T_comm = K [T_lat + N T_data]

A recursive-doubling all-gather actually moves (F-1) b_i units per hidden
layer, which is what the hypercube engine sends; that figure is reported as
``N2_measured_model``. One data unit is one float.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

from pydantic import Field, field_validator

from shardgrad.config import DomainConfig
from shardgrad.errors import InconsistencyError
from shardgrad.transport import MessageStats, Tag, is_power_of_two

logger = logging.getLogger(__name__)

EXAMPLE_TAGS = frozenset({Tag.INIT_DATA, Tag.PARTIAL_ACTIVATION, Tag.ERROR_BROADCAST, Tag.PARTIAL_ERROR})


class CostParams(DomainConfig):
    F: int = Field(ge=1)
    M: int = Field(1, ge=1)
    b: list[int]
    t_lat: float = Field(1e-4, ge=0)
    t_data: float = Field(1e-8, ge=0)

    @field_validator("b")
    @classmethod
    def _layers(cls, value: list[int]) -> list[int]:
        if len(value) < 2:
            raise ValueError(f"need at least 2 layers, got {len(value)}")
        if any(size < 1 for size in value):
            raise ValueError(f"layer sizes must be >= 1, got {value}")
        return value

    @property
    def n(self) -> int:
        return len(self.b)

    def with_workers(self, F: int) -> CostParams:
        return CostParams(**{**self.model_dump(), "F": F})


@dataclass(frozen=True)
class CostBreakdown:
    F: int
    K: float
    N1: float
    N2_paper: float
    N2_measured_model: float
    N3: float
    N: float
    N_raw: float
    T_comm: float
    exact_log2: bool = True


def cost_breakdown(p: CostParams) -> CostBreakdown:
    F, M, b = p.F, p.M, p.b
    hidden = b[1:-1]
    if F == 1:
        return CostBreakdown(F, 0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    exact = is_power_of_two(F)
    log2F = float(F.bit_length() - 1) if exact else math.log2(F)
    if not exact:
        logger.warning("F=%d is not a power of two; using real-valued log2 F = %.6f", F, log2F)

    per_layer = F * log2F + 2 * (F - 1)
    K = M * ((F - 1) + len(hidden) * per_layer)
    if exact:
        K = int(K)
    N1 = (F - 1) * (b[0] + b[-1] / F)
    N2_paper = sum(F * log2F * (bi / F) for bi in hidden)
    N2_measured = (F - 1) * sum(hidden)
    N3 = sum((F - 1) * b[i + 1] + (F - 1) * b[i] / F for i in range(1, p.n - 1))
    volume = N1 + N2_paper + N3
    N = volume / (K / M)
    T_comm = K * (p.t_lat + N * p.t_data)
    return CostBreakdown(F, K, N1, N2_paper, N2_measured, N3, N, volume / K, T_comm, exact)


def sweep(p: CostParams, f_list) -> list[CostBreakdown]:
    return [cost_breakdown(p.with_workers(F)) for F in f_list]


# ── Reconciliation against measured traffic ──────────────────────────────────

@dataclass(frozen=True)
class Check:
    name: str
    expected: float
    measured: float
    passed: bool

    @classmethod
    def exact(cls, name: str, expected: float, measured: float) -> Check:
        return cls(name, expected, measured, expected == measured)

    @classmethod
    def within(cls, name: str, expected: float, measured: float, rel_tol: float) -> Check:
        return cls(name, expected, measured, math.isclose(expected, measured, rel_tol=rel_tol, abs_tol=rel_tol))


@dataclass
class ReconciliationReport:
    breakdown: CostBreakdown
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]


def validate_measured(p: CostParams, stats: MessageStats) -> ReconciliationReport:
    """Compare one hypercube epoch's traffic with the model for the same F, M and sizes."""
    F, M = p.F, p.M
    if F > 1 and not is_power_of_two(F):
        raise InconsistencyError(f"reconciliation needs a power-of-two F, got {F}")
    foreign = sorted(t.name for t in stats.by_tag if t not in EXAMPLE_TAGS)
    if foreign:
        raise InconsistencyError(f"stats contain traffic outside the per-example exchange: {foreign}")
    if stats.messages(Tag.INIT_DATA) != M * (F - 1):
        raise InconsistencyError(
            f"{stats.messages(Tag.INIT_DATA)} InitData messages do not fit M={M}, F={F} "
            f"(expected {M * (F - 1)})"
        )

    bd = cost_breakdown(p)
    forward = stats.units(Tag.PARTIAL_ACTIVATION)
    backward = stats.units(Tag.ERROR_BROADCAST) + stats.units(Tag.PARTIAL_ERROR)
    report = ReconciliationReport(bd, [
        Check.exact("messages", bd.K, stats.message_count),
        Check.exact("init_units", M * bd.N1, stats.units(Tag.INIT_DATA)),
        Check.exact("forward_units", M * bd.N2_measured_model, forward),
        Check.exact("backward_units", M * bd.N3, backward),
    ])
    if F > 1 and bd.N2_measured_model > 0:
        log2F = F.bit_length() - 1
        report.checks.append(Check.within("forward_ratio", log2F / (F - 1),
                                          bd.N2_paper / bd.N2_measured_model, 1e-12))
    for check in report.failed():
        logger.warning("Cost model check %s failed: expected %s, measured %s", check.name, check.expected,
                       check.measured)
    return report
