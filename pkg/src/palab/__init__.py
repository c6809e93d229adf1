"""Numerical laboratory for a slowed-down smooth model of a hyperbolic
surface map with cone singularities.

Modules:
    slowdown: the radial taper, the slowed linear flow and its time-t map.
    charts: sector coordinates, the mass redistribution map, the invariant
        density, and the corrected local time-one map.
    surface: the branched double cover of the torus and the global map.
    verify: direct numerical checks of the orbit-deviation estimates.
    stats: long-run statistics (return tails, correlations, CLT, large
        deviations, Lyapunov exponents).
    cli: the pa-lab command line driver.
"""

from __future__ import annotations

__version__ = "0.1.0"
