"""AdamW with decoupled weight decay, plus a warmup + cosine LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GradientError


@dataclass
class OptimState:
    """Per-run optimizer state. Moments are keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state: OptimState, lr: float):
    """One AdamW update in place.

    ``params`` maps name -> Matrix, ``grads`` maps name -> ndarray (missing
    or None means a zero gradient: moments still decay, decay still applies).
    Decay is decoupled: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.a)
        if not np.isfinite(g).all():
            raise GradientError(f"non-finite gradient for parameter '{name}'")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.a)
            state.v[name] = np.zeros_like(p.a)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.a -= lr * (m_hat / (np.sqrt(v_hat) + state.eps)
                     + state.weight_decay * p.a)


@dataclass
class LrSchedule:
    """Linear warmup to ``max_lr`` then cosine decay to ``min_lr``."""

    max_lr: float
    warmup_ratio: float
    total_steps: int
    min_lr: float = 0.0

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must be in [0, 1)")
        self.warmup_steps = int(round(self.warmup_ratio * self.total_steps))

    def lr_at(self, step: int) -> float:
        """LR for optimizer step ``step`` (1-based; step 0 returns 0 under
        warmup). Past ``total_steps`` the schedule stays at ``min_lr``."""
        w = self.warmup_steps
        if step <= w and w > 0:
            return self.max_lr * step / w
        if step >= self.total_steps:
            return self.min_lr
        span = self.total_steps - w
        frac = (step - w) / span
        cos = 0.5 * (1.0 + math.cos(math.pi * frac))
        return self.min_lr + (self.max_lr - self.min_lr) * cos
