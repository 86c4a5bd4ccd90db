"""Learning-rate schedule and the momentum optimizer."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import NonFiniteUpdate


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    base_lr: float = 0.05
    warmup_steps: int = 1000
    total_steps: int = 90000  # cosine phase, after warmup
    momentum: float = 0.9
    w2: float = 1.0
    w1: float = 1.0
    seed: int = 0
    dtype: str = "float32"
    withhold_fraction: float = 0.0

    @classmethod
    def full(cls, **kw) -> TrainConfig:
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> TrainConfig:
        base = dict(batch_size=16, base_lr=0.01, warmup_steps=50, total_steps=450)
        base.update(kw)
        return cls(**base)

    @property
    def steps(self) -> int:
        return self.warmup_steps + self.total_steps

    def as_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0; 0 past the end."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step <= cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps if cfg.warmup_steps else cfg.base_lr
    t = step - cfg.warmup_steps
    if t >= cfg.total_steps:
        return 0.0
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * t / cfg.total_steps))


def sgd_momentum_step(params, grads, velocity, lr: float, momentum: float):
    """In place: ``v <- momentum * v + g``; ``p <- p - lr * v``. Arguments are dicts of arrays."""
    for k in params:
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise NonFiniteUpdate(f"non-finite gradient in {k}")
        v = velocity[k]
        v *= momentum
        v += g
        params[k] -= params[k].dtype.type(lr) * v
        if not np.all(np.isfinite(params[k])):
            raise NonFiniteUpdate(f"non-finite parameter in {k}")
    return params
