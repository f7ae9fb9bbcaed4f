"""SGD, momentum and RMSprop with per-array elementwise state.

State is keyed by array name, and every update is elementwise, so two copies
of the same values (a column shard and its row mirror, say) stay bit-identical
when fed identical gradients.
"""
from __future__ import annotations

import logging
import math
from typing import Literal

import numpy as np
from pydantic import Field, model_validator

from shardgrad.config import DomainConfig, RunConfig
from shardgrad.network.params import Parameters

logger = logging.getLogger(__name__)


class OptimizerConfig(DomainConfig):
    kind: Literal["sgd", "momentum", "rmsprop"] = "sgd"
    lr: float = Field(0.1, gt=0)
    schedule: Literal["constant", "inv_sqrt"] = "constant"
    momentum: float = Field(0.9, ge=0, lt=1)
    rho: float = Field(0.9, gt=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    batch: int = Field(16, ge=1)

    @model_validator(mode="after")
    def _finite(self) -> OptimizerConfig:
        if not all(math.isfinite(v) for v in (self.lr, self.momentum, self.rho, self.eps)):
            raise ValueError("optimizer constants must be finite")
        return self

    @classmethod
    def from_run(cls, cfg: RunConfig) -> OptimizerConfig:
        return cls(kind=cfg.optimizer, lr=cfg.lr, momentum=cfg.momentum, rho=cfg.rho,
                   eps=cfg.eps, batch=cfg.batch)


class Optimizer:
    """Applies one configured update rule to named arrays in place."""

    def __init__(self, config: OptimizerConfig) -> None:
        self.config = config
        self.steps = 0
        self._state: dict[str, np.ndarray] = {}

    def learning_rate(self, step: int | None = None) -> float:
        t = self.steps + 1 if step is None else step
        if self.config.schedule == "inv_sqrt":
            return self.config.lr / math.sqrt(t)
        return self.config.lr

    def update(self, name: str, weights: np.ndarray, grad: np.ndarray, lr: float) -> None:
        kind = self.config.kind
        if kind == "sgd":
            weights -= lr * grad
        elif kind == "momentum":
            v = self._state.setdefault(name, np.zeros_like(weights))
            v *= self.config.momentum
            v -= lr * grad
            weights += v
        else:
            cache = self._state.setdefault(name, np.zeros_like(weights))
            rho = self.config.rho
            cache *= rho
            cache += (1.0 - rho) * (grad * grad)
            weights -= lr * grad / (np.sqrt(cache) + self.config.eps)

    def apply(self, params: Parameters, grads: Parameters, lr: float | None = None, prefix: str = "") -> float:
        """Update every array of ``params``; returns the learning rate used."""
        return self.apply_arrays(
            ((f"{prefix}{i}.{name}", w, g) for (i, name, w), (_, _, g) in zip(params.items(), grads.items())),
            lr,
        )

    def apply_arrays(self, triples, lr: float | None = None) -> float:
        """One optimizer step over (name, weights, grad) triples."""
        lr = self.learning_rate() if lr is None else lr
        for name, w, g in triples:
            self.update(name, w, g, lr)
        self.steps += 1
        return lr

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._state.items()}
