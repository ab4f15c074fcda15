"""Piecewise-quintic profile numerics shared by cutoffs and partition weights.

The quintic smoothstep is C^2 at its joints with vanishing first and second
derivatives at both ends, which is what the collar cutoff requires.
"""

import numpy as np


def smoothstep(u):
    """Quintic smoothstep: 0 for u<=0, 1 for u>=1, 6u^5-15u^4+10u^3 between."""
    v = np.clip(u, 0.0, 1.0)
    return v**3 * (10.0 + v * (6.0 * v - 15.0))


def smoothstep_d(u, order):
    """order-th derivative of smoothstep w.r.t. u (order 1..4; 0 outside (0,1))."""
    v = np.clip(u, 0.0, 1.0)
    inside = (u > 0.0) & (u < 1.0)
    if order == 1:
        d = 30.0 * v**2 * (v - 1.0) ** 2
    elif order == 2:
        d = 60.0 * v * (v - 1.0) * (2.0 * v - 1.0)
    elif order == 3:
        d = 60.0 * (6.0 * v * v - 6.0 * v + 1.0)
    elif order == 4:
        d = 360.0 * v - 180.0
    else:
        raise ValueError(f"smoothstep derivative order {order} not supported")
    return np.where(inside, d, 0.0)


class StepDown:
    """1 -> 0 transition over [lo, hi] built on the quintic smoothstep."""

    def __init__(self, lo, hi):
        if not hi > lo:
            raise ValueError("degenerate transition band")
        self.lo, self.hi = float(lo), float(hi)
        self.width = self.hi - self.lo

    def __call__(self, x):
        return 1.0 - smoothstep((np.asarray(x, dtype=float) - self.lo) / self.width)

    def deriv(self, x, order=1):
        u = (np.asarray(x, dtype=float) - self.lo) / self.width
        return -smoothstep_d(u, order) / self.width**order


class StepUp:
    """0 -> 1 transition over [lo, hi]."""

    def __init__(self, lo, hi):
        self._down = StepDown(lo, hi)

    def __call__(self, x):
        return 1.0 - self._down(x)

    def deriv(self, x, order=1):
        return -self._down.deriv(x, order)
