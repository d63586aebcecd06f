from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, **hyper) -> "AdamWState":
        st = cls(**hyper)
        for k, p in params.items():
            st.m[k] = np.zeros_like(p)
            st.v[k] = np.zeros_like(p)
        return st


def adamw_step(params: dict, grads: dict, state: AdamWState) -> None:
    """One AdamW update, in place on ``params`` and ``state``.

    Decoupled decay ``p -= lr * wd * p`` is applied first, then the
    bias-corrected adaptive step ``p -= lr * m_hat / (sqrt(v_hat) + eps)``.
    Parameters without an entry in ``grads`` are treated as having zero grad.
    """
    if state.lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {state.lr}")
    for k, p in params.items():
        g = grads.get(k)
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient for {k!r} has shape {g.shape}, parameter has {p.shape}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        elif state.m[k].shape != p.shape:
            raise ValueError(f"moment buffer for {k!r} has shape {state.m[k].shape}, parameter has {p.shape}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    step_size = state.lr / bc1
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        g = g.astype(p.dtype, copy=False)
        m, v = state.m[k], state.v[k]
        if state.weight_decay:
            p *= p.dtype.type(1.0 - state.lr * state.weight_decay)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / bc2) + state.eps
        p -= (step_size * m / denom).astype(p.dtype, copy=False)
