from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Parameter


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Parameter], grads: dict[str, np.ndarray] | None = None) -> None:
    """In-place Adam update with bias correction.

    ``grads`` defaults to each parameter's accumulated ``.grad``; parameters
    without a gradient are skipped. Non-finite gradients abort before any
    parameter is touched.
    """
    if grads is None:
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if p.data.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name!r} shape {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
