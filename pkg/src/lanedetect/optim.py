"""Adam optimizer, step-decay learning-rate schedule, He initialization."""

from dataclasses import dataclass, replace
from typing import Dict

import numpy as np

from .errors import DataError, DomainError, ShapeError
from .tensor import Tensor, _wrap

Params = Dict[str, np.ndarray]


@dataclass
class AdamState:
    """First/second moment estimates plus step count and hyperparameters."""

    m: Params
    v: Params
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: Params, lr: float = 1e-4) -> "AdamState":
        if lr <= 0:
            raise DomainError(f"lr must be positive, got {lr}")
        m = {k: np.zeros_like(p) for k, p in params.items()}
        v = {k: np.zeros_like(p) for k, p in params.items()}
        return cls(m=m, v=v, t=0, lr=lr)


def adam_step(params: Params, grads: Params, state: AdamState):
    """One Adam update with bias correction.  Returns (params', state').

    Purely functional: input arrays are left untouched, so checkpointed
    state and the live state never alias.
    """
    if set(params) != set(grads):
        raise ShapeError(f"param/grad name mismatch: {sorted(set(params) ^ set(grads))}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params: Params = {}
    new_m: Params = {}
    new_v: Params = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for {name!r}")
        if not np.isfinite(g).all():
            raise DataError(f"non-finite gradient for {name!r}")
        dt = p.dtype.type
        m = state.m[name] * dt(b1) + g * dt(1.0 - b1)
        v = state.v[name] * dt(b2) + (g * g) * dt(1.0 - b2)
        m_hat = m * dt(1.0 / (1.0 - b1 ** t))
        v_hat = v * dt(1.0 / (1.0 - b2 ** t))
        out = p - dt(state.lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))
        out.flags.writeable = False
        new_params[name] = out
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, m=new_m, v=new_v, t=t)


@dataclass(frozen=True)
class LrSchedule:
    initial: float
    factor: float = 1.0
    interval: int = 1
    floor: float = 1e-4

    def __post_init__(self):
        if self.initial <= 0:
            raise DomainError(f"initial lr must be positive, got {self.initial}")
        if not 0.0 < self.factor <= 1.0:
            raise DomainError(f"decay factor must be in (0, 1], got {self.factor}")
        if self.interval < 1:
            raise DomainError(f"decay interval must be >= 1, got {self.interval}")
        if self.floor > self.initial:
            raise DomainError(f"floor {self.floor} exceeds initial lr {self.initial}")


def schedule_lr(epoch: int, schedule: LrSchedule) -> float:
    """Step decay: initial * factor^(epoch // interval), clamped at floor."""
    return max(schedule.floor, schedule.initial * schedule.factor ** (epoch // schedule.interval))


def he_init(shape, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Normal(0, sqrt(2/fan_in)) init for conv weights (out, in, kh, kw)."""
    if len(shape) != 4:
        raise ShapeError(f"he_init expects a rank-4 shape, got {shape}")
    fan_in = shape[1] * shape[2] * shape[3]
    std = np.sqrt(2.0 / fan_in)
    return _wrap(rng.normal(0.0, std, size=tuple(shape)).astype(dtype))
