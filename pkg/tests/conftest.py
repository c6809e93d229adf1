"""Shared test helpers: the RK reference integrator and scale knobs."""

from __future__ import annotations

import os

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from palab.slowdown import SlowdownParams, slow_factor

# Sample-count scale for the long acceptance runs; tolerances never scale.
ACCEPT_SCALE = float(os.environ.get("PALAB_ACCEPT_SCALE", "1.0"))


def scaled(n: int, minimum: int = 1) -> int:
    return max(minimum, int(round(n * ACCEPT_SCALE)))


def rk_flow(s1: float, s2: float, t: float, params: SlowdownParams,
            rtol: float = 1e-12, atol: float = 1e-14) -> tuple[float, float]:
    """Adaptive RK integration of the slowed field; the independent oracle."""

    def field(_t, y):
        f = params.log_lam * slow_factor(y[0] * y[0] + y[1] * y[1], params)
        return [y[0] * f, -y[1] * f]

    sol = solve_ivp(field, (0.0, t), [s1, s2], method="DOP853",
                    rtol=rtol, atol=atol)
    assert sol.success, sol.message
    return float(sol.y[0, -1]), float(sol.y[1, -1])
