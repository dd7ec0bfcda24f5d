"""AdamW with bias correction and decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError


@dataclass
class OptimizerState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState):
    """One AdamW update. Returns ``(new_params, state)``.

    ``params`` and ``grads`` are left untouched; ``state`` advances in place.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        decayed = p - state.lr * state.weight_decay * p
        out[name] = decayed - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out, state
