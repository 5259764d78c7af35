"""Parameter-space optimizers with an optional cosine learning-rate decay.

The schedule is evaluated per apply() call: call k (1-based) uses
    lr_k = lr * 0.5 * (1 + cos(pi * (k - 1) / total_steps))
clipped at total_steps, so the first call sees the full rate and the rate
approaches zero as k -> total_steps. total_steps <= 0 disables the decay.
The step counter advances on every apply, including zero-gradient ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError

KINDS = ("sgd", "adamw")


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "adamw"
    lr: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    cosine: bool = True

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"optimizer kind must be one of {KINDS}, got {self.kind!r}")
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must be in [0, 1)")
        if self.eps <= 0.0:
            raise ConfigError("optimizer eps must be positive")


class OptState:
    """Per-client optimizer state over a fixed set of named parameters."""

    def __init__(self, cfg: OptimConfig, params: dict[str, np.ndarray], total_steps: int):
        cfg.validate()
        self.cfg = cfg
        self.total_steps = int(total_steps)
        self.step = 0
        self._names = list(params.keys())
        if cfg.kind == "adamw":
            self.m = {n: np.zeros_like(p) for n, p in params.items()}
            self.v = {n: np.zeros_like(p) for n, p in params.items()}

    def current_lr(self) -> float:
        """Rate the next apply() call will use."""
        if not self.cfg.cosine or self.total_steps <= 0:
            return self.cfg.lr
        t = min(self.step, self.total_steps)
        return self.cfg.lr * 0.5 * (1.0 + math.cos(math.pi * t / self.total_steps))

    def apply(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """One in-place update over the registered parameter names."""
        lr = self.current_lr()
        self.step += 1
        cfg = self.cfg
        if cfg.kind == "sgd":
            for n in self._names:
                p = params[n]
                p -= lr * (grads[n] + cfg.weight_decay * p)
            return
        k = self.step
        bc1 = 1.0 - cfg.beta1 ** k
        bc2 = 1.0 - cfg.beta2 ** k
        for n in self._names:
            p, g = params[n], grads[n]
            m, v = self.m[n], self.v[n]
            m[...] = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v[...] = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            p -= lr * (update + cfg.weight_decay * p)
