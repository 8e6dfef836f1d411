"""Parameter updates (SGD with momentum, Adam) and the warm-restart schedule.

Updates mutate the parameter arrays in place and also return them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ContractError


@dataclass
class SGDState:
    lr: float = 0.001
    momentum: float = 0.9
    velocity: list = field(default_factory=list)


@dataclass
class AdamState:
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def _check(params, grads, buffers):
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ContractError(f"param shape {p.shape} != grad shape {g.shape}")
    for buf in buffers:
        if buf and len(buf) != len(params):
            raise ContractError("optimizer state does not match the parameter list")


def sgd_momentum_step(params, grads, state, lr=None):
    """Classical momentum: ``v <- mu*v - lr*g``; ``p <- p + v``."""
    _check(params, grads, [state.velocity])
    lr = state.lr if lr is None else lr
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, state.velocity):
        v *= state.momentum
        v -= lr * g
        p += v
    return params


def adam_step(params, grads, state, lr=None):
    """Adam with bias-corrected first and second moment estimates."""
    _check(params, grads, [state.m, state.v])
    lr = state.lr if lr is None else lr
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass(frozen=True)
class LrSchedule:
    """Cosine annealing with warm restarts; each period is ``period_multiplier`` times longer."""

    initial_lr: float = 0.001
    period: int = 1500
    period_multiplier: float = 2.0

    def __post_init__(self):
        if self.initial_lr <= 0 or self.period < 1 or self.period_multiplier < 1:
            raise ConfigError(f"invalid schedule {self}")


def lr_at(schedule, step):
    if step < 0:
        raise ContractError("step must be non-negative")
    t, length = step, schedule.period
    while t >= length:
        t -= length
        length = int(round(length * schedule.period_multiplier))
    # t < length keeps the rate strictly positive
    return 0.5 * schedule.initial_lr * (1.0 + math.cos(math.pi * t / length))
