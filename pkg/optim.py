"""
optim.py
Adam and plain SGD over NetworkParams. Tensors are immutable, so a step
returns a new NetworkParams; optimizer moments live on the optimizer.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from errors import DataError, NumericError
from networks import NetworkParams
from tensor_autodiff import Tensor

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in OPTIMIZERS:
            raise DataError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZERS}")
        if self.learning_rate < 0:
            raise DataError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise DataError("Adam betas must be in [0, 1)")
        if self.eps <= 0:
            raise DataError("eps must be positive")
        if not 0 <= self.momentum < 1:
            raise DataError("momentum must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, config: OptimizerConfig) -> None:
        self.lr = config.learning_rate
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.eps = config.eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: NetworkParams, grads: Mapping[str, Tensor]) -> NetworkParams:
        self.t += 1
        updates = {}
        for name, grad in grads.items():
            g = np.asarray(grad.data, dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * (g * g)
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            p = params[name].data
            updates[name] = Tensor(p - (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype))
        return params.with_tensors(updates)


class SGD:
    def __init__(self, config: OptimizerConfig) -> None:
        self.lr = config.learning_rate
        self.momentum = config.momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: NetworkParams, grads: Mapping[str, Tensor]) -> NetworkParams:
        updates = {}
        for name, grad in grads.items():
            g = np.asarray(grad.data, dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
            vel = self.momentum * self.velocity.get(name, np.zeros_like(g)) + g
            self.velocity[name] = vel
            p = params[name].data
            updates[name] = Tensor(p - (self.lr * vel).astype(p.dtype))
        return params.with_tensors(updates)


def make_optimizer(config: OptimizerConfig) -> Adam | SGD:
    logger.debug("optimizer %s lr=%g", config.kind, config.learning_rate)
    return Adam(config) if config.kind == "adam" else SGD(config)
