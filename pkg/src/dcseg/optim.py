"""Adam with L2 weight decay and a per-step cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params, grads, state: OptimizerState, lr: float, beta1: float = 0.9,
              beta2: float = 0.99, weight_decay: float = 0.0, eps: float = 1e-8,
              decoupled: bool = False):
    """One in-place Adam update.

    Weight decay is added to the gradient (L2 form) unless ``decoupled``, in
    which case parameters shrink by ``lr * weight_decay`` outside the moments.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if weight_decay and not decoupled:
            g = g + weight_decay * p
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay and decoupled:
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def cosine_lr(t: int, total: int, lr0: float = 4e-4, lr_min: float = 1e-6) -> float:
    if t >= total:
        return lr_min
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total))
