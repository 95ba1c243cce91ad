"""AdamW with decoupled weight decay, updating parameters in place."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError, ShapeError


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.betas = (float(self.betas[0]), float(self.betas[1]))
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")

    def header(self) -> dict:
        return {
            "step": self.step,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "betas": list(self.betas),
            "eps": self.eps,
        }

    def moments(self, name: str, shape: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.m:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
        m, v = self.m[name], self.v[name]
        if m.shape != tuple(shape):
            raise ShapeError(f"optimizer moments for {name} have shape {m.shape}, parameter is {shape}")
        return m, v


def adamw_update(opt: OptimizerState, params: Sequence[tuple[str, nx.Tensor]],
                 frozen: frozenset[str] = frozenset()) -> None:
    """One step over ``params`` using each tensor's ``.grad``; frozen names are left alone."""
    opt.step += 1
    b1, b2 = opt.betas
    bc1 = 1.0 - b1 ** opt.step
    bc2 = 1.0 - b2 ** opt.step
    for name, p in params:
        if name in frozen:
            continue
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        m, v = opt.moments(name, p.shape)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if opt.weight_decay:
            p.data *= 1.0 - opt.lr * opt.weight_decay
        p.data -= (opt.lr / bc1) * m / (np.sqrt(v / bc2) + opt.eps)
