"""Rectified-flow pairs, losses and Euler sampling.

Convention: ``x_t = (1 - t) * x0 + t * eps`` with constant velocity
``v = eps - x0``; sampling starts from noise at ``t = 1`` and integrates
towards ``t = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numcore import NonFiniteError, SeededStream


@dataclass
class FlowExample:
    x0: np.ndarray
    eps: np.ndarray
    t: float
    x_t: np.ndarray
    v_target: np.ndarray


def interpolate(x0, eps, t):
    t = np.asarray(t, dtype=x0.dtype)
    return (1 - t) * x0 + t * eps


def make_training_example(x0: np.ndarray, rng: SeededStream, t: float | None = None) -> FlowExample:
    """Draw ``eps ~ N(0, I)`` and ``t ~ U[0, 1]`` (unless ``t`` is given)."""
    x0 = np.asarray(x0)
    if not np.isfinite(x0).all():
        raise ValueError("x0 contains non-finite values")
    if t is None:
        t = float(rng.uniform())
    eps = rng.normal(x0.shape).astype(x0.dtype)
    return FlowExample(x0=x0, eps=eps, t=t, x_t=interpolate(x0, eps, t), v_target=eps - x0)


def _mse(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


def flow_loss(v_pred, v_target) -> float:
    """Mean squared error between predicted and target velocity."""
    return _mse(v_pred, v_target)


def direct_loss(prediction, target) -> float:
    """Pixel mean squared error; images are expected in [0, 1]."""
    return _mse(prediction, target)


def sample(
    velocity: Callable[[np.ndarray, float], np.ndarray],
    shape: tuple,
    steps: int,
    rng: SeededStream | None = None,
    x1: np.ndarray | None = None,
    dtype=np.float32,
) -> np.ndarray:
    """Euler-integrate ``dx/dt = velocity(x, t)`` from ``t = 1`` down to ``t = 0``.

    The starting noise is ``x1`` if given, else drawn from ``rng``. Uses ``steps``
    uniform steps of size ``1 / steps``.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if x1 is None:
        if rng is None:
            raise ValueError("need either rng or x1")
        x1 = rng.normal(shape).astype(dtype)
    x = np.array(x1, dtype=dtype, copy=True)
    dt = np.dtype(dtype).type(1.0 / steps)
    for i in range(steps):
        t = 1.0 - i / steps
        v = np.asarray(velocity(x, t), dtype=x.dtype)
        x = x - dt * v
        if not np.isfinite(x).all():
            raise NonFiniteError(f"euler_step#{i}", "non-finite sampler state")
    return x
