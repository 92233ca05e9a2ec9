"""Adam over named parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, hyper=AdamConfig(), lr=None):
    """One bias-corrected Adam update.

    ``params``/``grads`` map names to arrays; only names present in ``grads``
    are updated. ``lr`` overrides ``hyper.lr`` and may be a per-name dict.
    Returns new (params, state); inputs are not modified.
    """
    t = state.t + 1
    b1, b2 = hyper.beta1, hyper.beta2
    out = dict(params)
    m_new, v_new = dict(state.m), dict(state.v)
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        p = np.asarray(params[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for '{name}' has shape {g.shape}, expected {p.shape}")
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        step = hyper.lr if lr is None else (lr[name] if isinstance(lr, dict) else lr)
        out[name] = p - step * mhat / (np.sqrt(vhat) + hyper.eps)
        m_new[name], v_new[name] = m, v
    return out, AdamState(m_new, v_new, t)
