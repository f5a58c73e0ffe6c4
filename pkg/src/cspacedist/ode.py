"""Fixed-step classical Runge-Kutta integration.

States are tuples of arrays (or autodiff tensors); ``f(t, state)`` returns a
tuple of derivatives with the same structure.
"""
from __future__ import annotations

import numpy as np


class DivergenceError(FloatingPointError):
    pass


def _axpy(y, k, h):
    return tuple(yi + h * ki for yi, ki in zip(y, k))


def rk4_step(f, t, y, h):
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, _axpy(y, k1, 0.5 * h))
    k3 = f(t + 0.5 * h, _axpy(y, k2, 0.5 * h))
    k4 = f(t + h, _axpy(y, k3, h))
    return tuple(yi + (h / 6.0) * (a + 2.0 * b + 2.0 * c + d)
                 for yi, a, b, c, d in zip(y, k1, k2, k3, k4))


def _finite(y) -> bool:
    for yi in y:
        data = getattr(yi, "data", yi)
        if not np.all(np.isfinite(data)):
            return False
    return True


def rk4(f, y0, t0: float, t1: float, n_steps: int):
    """Integrate from ``t0`` to ``t1`` (either direction) in ``n_steps`` equal steps."""
    if n_steps < 1:
        raise ValueError("n_steps must be positive")
    y = tuple(y0)
    h = (t1 - t0) / n_steps
    for i in range(n_steps):
        y = rk4_step(f, t0 + i * h, y, h)
        if not _finite(y):
            raise DivergenceError(f"non-finite state after step {i + 1} of {n_steps}")
    return y
