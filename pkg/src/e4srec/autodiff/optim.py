from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from e4srec.autodiff.tensor import Tensor
from e4srec.errors import DimensionError

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: list[Tensor], grads: dict[Tensor, np.ndarray], state: AdamState, lr: float) -> AdamState:
    """One Adam update with bias correction and decoupled weight decay.

    Parameters are updated in place. A parameter missing from ``grads`` is
    treated as having a zero gradient (its moments still decay).
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for p in params:
        g = grads.get(p)
        if g is not None and g.shape != p.shape:
            raise DimensionError(f"adam_step: grad shape {g.shape} does not match param shape {p.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        key = id(p)
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            p.data -= (lr * state.weight_decay) * p.data
        p.data -= (lr * update).astype(p.data.dtype)
    return state


@dataclass(frozen=True)
class LRSchedule:
    base_lr: float
    warmup_steps: int
    total_steps: int
    kind: str = "cosine"

    def __post_init__(self):
        if self.kind != "cosine":
            raise ValueError(f"unsupported schedule {self.kind!r}")
        if self.base_lr < 0 or self.warmup_steps < 0 or self.total_steps < 1:
            raise ValueError("schedule needs base_lr >= 0, warmup_steps >= 0, total_steps >= 1")


def lr_at(schedule: LRSchedule, step: int) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero at ``total_steps``."""
    if step > schedule.total_steps:
        log.warning("step %d is past total_steps %d; clamping", step, schedule.total_steps)
        step = schedule.total_steps
    step = max(step, 0)
    warm = min(schedule.warmup_steps, schedule.total_steps)
    if step < warm:
        return schedule.base_lr * step / warm
    span = schedule.total_steps - warm
    if span == 0:
        return schedule.base_lr
    progress = (step - warm) / span
    return max(0.0, schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress)))
