"""AdamW with decoupled weight decay."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class AdamWState:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, state):
    """Update ``params`` (mapping name -> Tensor) in place from their ``.grad``."""
    items = list(params.items()) if isinstance(params, dict) else list(params)
    for name, p in items:
        if p.grad is None:
            raise ContractError(f"parameter {name} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in items:
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p.data
        p.data -= state.lr * update
