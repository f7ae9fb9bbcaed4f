"""Central-difference gradient oracle."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from shardgrad.network.params import Gradients, Parameters
from shardgrad.network.passes import LossKind, backward, forward, loss
from shardgrad.network.recurrent import run_sequence, tbptt_step
from shardgrad.network.spec import NetworkSpec

logger = logging.getLogger(__name__)

REL_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst: str
    checked: int

    def passed(self, tolerance: float = 1e-5) -> bool:
        return self.max_relative_error <= tolerance


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def numeric_gradients(params: Parameters, objective: Callable[[Parameters], float],
                      h: float = 1e-5) -> Parameters:
    """(f(w + h) − f(w − h)) / 2h for every scalar parameter."""
    probe = params.copy()
    out = params.zeros_like()
    for (_, _, arr), (_, _, dest) in zip(probe.items(), out.items()):
        flat = arr.reshape(-1)
        dflat = dest.reshape(-1)
        for k in range(flat.size):
            saved = flat[k]
            flat[k] = saved + h
            up = objective(probe)
            flat[k] = saved - h
            down = objective(probe)
            flat[k] = saved
            dflat[k] = (up - down) / (2.0 * h)
    return out


def compare(analytic: Parameters, numeric: Parameters) -> GradCheckReport:
    worst, worst_name, checked = 0.0, "", 0
    for (i, name, a), (_, _, n) in zip(analytic.items(), numeric.items()):
        for a_val, n_val in zip(a.reshape(-1), n.reshape(-1)):
            err = relative_error(float(a_val), float(n_val))
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{i}.{name}"
    return GradCheckReport(worst, worst_name, checked)


def gradient_check(spec: NetworkSpec, params: Parameters, x, target, loss_kind: LossKind = "cross_entropy",
                   mask=None, h: float = 1e-5,
                   analytic: Gradients | None = None) -> GradCheckReport:
    """Compare backprop (or the supplied ``analytic`` gradients) against central differences.

    Recurrent nets take ``x``/``target`` as sequences and are checked with full BPTT.
    """
    if spec.is_recurrent:
        steps = len(x)

        def objective(p: Parameters) -> float:
            outputs, _ = run_sequence(spec, p, x, mask)
            return sum(loss(loss_kind, o, t) for o, t in zip(outputs, target) if o is not None)

        if analytic is None:
            analytic, _ = tbptt_step(spec, params, x, target, mask, truncation=max(steps, 1), loss_kind=loss_kind)
    else:
        def objective(p: Parameters) -> float:
            return loss(loss_kind, forward(spec, p, x).output, target)

        if analytic is None:
            analytic, _ = backward(spec, params, forward(spec, params, x), target, loss_kind)

    report = compare(analytic, numeric_gradients(params, objective, h))
    logger.debug("Gradient check: %d values, max relative error %.3e at %s",
                 report.checked, report.max_relative_error, report.worst)
    return report
