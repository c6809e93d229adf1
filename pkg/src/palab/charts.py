"""Singular-chart coordinate machinery.

Maps between the cover chart around a branch point and the sector coordinate
where the slowed flow lives: the sector coordinate change, the radial mass
redistribution map (which makes the invariant area form a constant multiple
of Lebesgue measure near the branch point), the density of the invariant
area form, and the corrected local time-one map.

All public functions accept scalar complex arguments or numpy arrays of them
and return values of matching shape.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .slowdown import (
    ConvergenceError,
    SlowdownParams,
    _bump,
    flow_time_batch,
    slow_factor,
    taper_antideriv,
)

TWO_PI = 2.0 * math.pi


def _bump_deriv(v: np.ndarray) -> np.ndarray:
    """Derivative of the smooth step with respect to v, vectorized."""
    v = np.clip(np.asarray(v, dtype=float), 0.0, 1.0)
    inside = (v > 0.0) & (v < 1.0)
    out = np.zeros_like(v)
    vv = np.where(inside, v, 0.5)
    e0 = np.exp(-1.0 / vv)
    e1 = np.exp(-1.0 / (1.0 - vv))
    np.copyto(out, e0 * e1 * (1.0 / vv ** 2 + 1.0 / (1.0 - vv) ** 2) / (e0 + e1) ** 2,
              where=inside)
    return out


class PushProfile:
    """Radial profile of the mass redistribution map and its inverse.

    The profile m sends the flow-coordinate radius r to the measured radius
    m(r), with four zones in the log coordinate E = log r:

      * pure power, r <= r1: m(r) = r**q with q = p(1-alpha)/2 (the
        normalization constant cancels exactly against the closed-form
        antiderivative of 1/taper on this zone);
      * measured, r1 < r <= push_lo: m(r) = A * M(r**2)**(p/4), M the
        antiderivative of 1/taper and A the normalization constant;
      * blend, push_lo < r < push_hi: C-infinity mix of the measured branch
        and the identity, taken in log coordinates;
      * identity, r >= push_hi.

    The identity tail keeps the corrected local map equal to the plain linear
    model on the outer part of the chart; without it the radial map would
    differ from the identity arbitrarily far from the branch point and the
    correction seam would not close.  Monotonicity of the profile is asserted
    on a grid at construction time and is a hard failure if violated.
    """

    def __init__(self, params: SlowdownParams):
        self.params = params
        self.q = params.push_exponent
        self.log_r1 = math.log(params.r1)
        self.log_lo = math.log(params.push_lo)
        self.log_hi = math.log(params.push_hi)
        self.log_a = math.log(params.a_coeff)
        self.pure_top = self.q * self.log_r1
        grid = np.linspace(self.log_r1 - 2.0, self.log_hi + 0.3, 4096)
        if float(np.min(self.log_map_deriv(grid))) <= 0.0:
            raise ValueError("push profile is not strictly increasing")
        if float(np.min(np.diff(self.log_map(grid)))) <= 0.0:
            raise ValueError("push profile values are not strictly increasing")

    # -- log-space maps -----------------------------------------------------

    def _measured(self, e: np.ndarray) -> np.ndarray:
        big_r = np.exp(2.0 * e)
        return self.log_a + 0.25 * self.params.p * np.log(
            taper_antideriv(big_r, self.params))

    def _measured_deriv(self, e: np.ndarray) -> np.ndarray:
        big_r = np.exp(2.0 * e)
        return (0.5 * self.params.p * big_r
                / (slow_factor(big_r, self.params)
                   * taper_antideriv(big_r, self.params)))

    def log_map(self, e) -> np.ndarray:
        """log m(exp(e)) for any real e, vectorized."""
        e = np.asarray(e, dtype=float)
        out = np.where(e <= self.log_r1, self.q * e, e)
        mid = (e > self.log_r1) & (e < self.log_hi)
        if np.any(mid):
            em = e[mid]
            meas = self._measured(em)
            v = (em - self.log_lo) / (self.log_hi - self.log_lo)
            chi = _bump(v)
            out = out.copy()
            out[mid] = (1.0 - chi) * meas + chi * em
        return out

    def log_map_deriv(self, e) -> np.ndarray:
        """d/de of log_map, vectorized; strictly positive."""
        e = np.asarray(e, dtype=float)
        out = np.where(e <= self.log_r1, self.q, 1.0)
        mid = (e > self.log_r1) & (e < self.log_hi)
        if np.any(mid):
            em = e[mid]
            meas = self._measured(em)
            dmeas = self._measured_deriv(em)
            width = self.log_hi - self.log_lo
            v = (em - self.log_lo) / width
            chi = _bump(v)
            dchi = _bump_deriv(v) / width
            out = out.copy()
            out[mid] = (1.0 - chi) * dmeas + chi + dchi * (em - meas)
        return out

    def log_map_inv(self, t) -> np.ndarray:
        """Inverse of log_map, vectorized safeguarded Newton."""
        t = np.asarray(t, dtype=float)
        out = np.where(t <= self.pure_top, t / self.q, t)
        mid = (t > self.pure_top) & (t < self.log_hi)
        if not np.any(mid):
            return out
        tm = t[mid]
        e = np.clip(tm, self.log_r1, self.log_hi)
        lo = np.full(tm.shape, self.log_r1)
        hi = np.full(tm.shape, self.log_hi)
        ix = np.arange(tm.size)
        tol = 1e-14 * np.maximum(1.0, np.abs(tm))
        for _ in range(80):
            f = self.log_map(e[ix]) - tm[ix]
            done = np.abs(f) <= tol[ix]
            keep = ~done
            ix = ix[keep]
            if ix.size == 0:
                break
            f = f[keep]
            lo[ix] = np.where(f < 0.0, e[ix], lo[ix])
            hi[ix] = np.where(f > 0.0, e[ix], hi[ix])
            cand = e[ix] - f / self.log_map_deriv(e[ix])
            bad = ~((cand > lo[ix]) & (cand < hi[ix]))
            e[ix] = np.where(bad, 0.5 * (lo[ix] + hi[ix]), cand)
        if ix.size:
            raise ConvergenceError("push profile inversion did not converge")
        out = out.copy()
        out[mid] = e
        return out

    # -- radius-space wrappers ---------------------------------------------

    def radius(self, r):
        """m(r) for r >= 0, scalar or array.

        The identity zone passes the input through bit-exactly (no log/exp
        roundtrip), which is what makes "the map is the plain linear model
        outside the support" an equality rather than an approximation.
        """
        arr = np.asarray(r, dtype=float)
        if np.any(arr < 0.0) or not np.all(np.isfinite(arr)):
            raise ValueError("radius must be finite and nonnegative")
        hi = math.exp(self.log_hi)
        act = (arr > 0.0) & (arr < hi)
        out = arr.copy()
        if np.any(act):
            out[act] = np.exp(self.log_map(np.log(arr[act])))
        return float(out) if np.ndim(r) == 0 else out

    def radius_deriv(self, r):
        """m'(r) for r > 0, scalar or array."""
        arr = np.asarray(r, dtype=float)
        if np.any(arr <= 0.0) or not np.all(np.isfinite(arr)):
            raise ValueError("radius must be finite and positive")
        e = np.log(arr)
        out = np.exp(self.log_map(e) - e) * self.log_map_deriv(e)
        return float(out) if np.ndim(r) == 0 else out

    def radius_inv(self, s):
        """The r with m(r) = s, for s >= 0, scalar or array; identity zone
        passes through bit-exactly like radius."""
        arr = np.asarray(s, dtype=float)
        if np.any(arr < 0.0) or not np.all(np.isfinite(arr)):
            raise ValueError("radius must be finite and nonnegative")
        hi = math.exp(self.log_hi)
        act = (arr > 0.0) & (arr < hi)
        out = arr.copy()
        if np.any(act):
            out[act] = np.exp(self.log_map_inv(np.log(arr[act])))
        return float(out) if np.ndim(s) == 0 else out


@lru_cache(maxsize=32)
def push_profile(params: SlowdownParams) -> PushProfile:
    """The cached radial profile for a parameter set."""
    return PushProfile(params)


def _as_complex(z):
    arr = np.asarray(z, dtype=complex)
    if not np.all(np.isfinite(arr)):
        raise ValueError("chart point must be finite")
    return arr


def mass_push(z, params: SlowdownParams):
    """The radial mass redistribution map in the sector coordinate.

    Sends z to m(|z|) * z/|z| where m is the push profile; fixes 0.  For the
    control model (slow-down disabled) there is no mass to redistribute and
    the map is the identity.
    """
    arr = _as_complex(z)
    if params.disabled:
        out = arr
    else:
        prof = push_profile(params)
        r = np.abs(arr)
        pos = r > 0.0
        out = np.zeros_like(arr)
        if np.any(pos):
            out[pos] = (prof.radius(r[pos]) / r[pos]) * arr[pos]
    return complex(out) if np.ndim(z) == 0 else out


def mass_push_inv(w, params: SlowdownParams):
    """Exact radial inverse of mass_push."""
    arr = _as_complex(w)
    if params.disabled:
        out = arr
    else:
        prof = push_profile(params)
        s = np.abs(arr)
        pos = s > 0.0
        out = np.zeros_like(arr)
        if np.any(pos):
            out[pos] = (prof.radius_inv(s[pos]) / s[pos]) * arr[pos]
    return complex(out) if np.ndim(w) == 0 else out


# ---------------------------------------------------------------------------
# Sector coordinate


def sector_of(z, params: SlowdownParams):
    """Index of the sector wedge containing z, in {0, ..., p-1}.

    Wedge j spans angles within pi/p of 2*pi*j/p.  Angles within 1e-12 of a
    wedge boundary ray are assigned to the lower of the two adjacent wedge
    indices (the sector charts agree on the boundary rays, so the choice is
    inert).
    """
    arr = _as_complex(z)
    p = params.p
    x = np.angle(arr) * p / TWO_PI
    j = np.floor(x + 0.5).astype(int)
    scale = TWO_PI / p
    lo_tie = (x - (j - 0.5)) * scale <= 1e-12
    hi_tie = ((j + 0.5) - x) * scale <= 1e-12
    jm = j % p
    jm = np.where(lo_tie, np.minimum(jm, (j - 1) % p), jm)
    jm = np.where(hi_tie, np.minimum(jm, (j + 1) % p), jm)
    return int(jm) if np.ndim(z) == 0 else jm


def sector_map(z, j, params: SlowdownParams):
    """Sector coordinate of a chart point in wedge j.

    Computes (-1)**j * (2/p) * z**(p/2) with the branch continuous on the
    wedge; the image lies in the closed right half-plane.  Raises ValueError
    if z is outside wedge j (beyond a 1e-12 angular tolerance); z = 0 is an
    allowed boundary case mapping to 0.
    """
    arr = _as_complex(z)
    p = params.p
    jj = np.asarray(j, dtype=int)
    theta = np.angle(arr)
    dtheta = theta - TWO_PI * jj / p
    dtheta = (dtheta + math.pi) % TWO_PI - math.pi
    r = np.abs(arr)
    if np.any((np.abs(dtheta) > math.pi / p + 1e-12) & (r > 0.0)):
        raise ValueError("chart point outside the requested sector wedge")
    out = (2.0 / p) * r ** (0.5 * p) * np.exp(1j * dtheta * 0.5 * p)
    return complex(out) if np.ndim(z) == 0 else out


def sector_map_inv(s, j, params: SlowdownParams):
    """Chart point of a sector coordinate in wedge j; inverse of sector_map."""
    arr = _as_complex(s)
    p = params.p
    jj = np.asarray(j, dtype=int)
    r = (0.5 * p * np.abs(arr)) ** (2.0 / p)
    ang = TWO_PI * jj / p + np.angle(arr) * 2.0 / p
    out = r * np.exp(1j * ang)
    return complex(out) if np.ndim(s) == 0 else out


# ---------------------------------------------------------------------------
# The corrected local map


def local_time_one(z, params: SlowdownParams, inverse: bool = False):
    """One step of the corrected local map in the cover chart.

    Conjugates the slowed time-one flow by the chart change: sector
    coordinate, then the inverse mass push.  Forward steps preserve the
    sector wedge; the map is continuous across wedge boundaries.
    """
    arr = _as_complex(z)
    flat = np.atleast_1d(arr).ravel()
    j = sector_of(flat, params)
    s = sector_map(flat, j, params)
    f = mass_push_inv(s, params)
    o1, o2 = flow_time_batch(f.real, f.imag, -1.0 if inverse else 1.0, params)
    w = mass_push(o1 + 1j * o2, params)
    out = sector_map_inv(w, j, params)
    if np.ndim(z) == 0:
        return complex(out[0])
    return out.reshape(arr.shape)


def local_correction(s, params: SlowdownParams, inverse: bool = False):
    """Correction factor of one local step, in the sector coordinate.

    Forward returns Lin^{-1}(push(G(push^{-1}(s)))) where G is the slowed
    time-one flow and Lin(s) = (lam*s1, s2/lam) is the plain linear model:
    composing Lin after the forward factor gives one full local step.
    Backward returns push(G^{-1}(push^{-1}(Lin(s)))), the exact inverse of
    the forward factor.
    """
    arr = _as_complex(s)
    lam = params.lam
    if not inverse:
        f = mass_push_inv(arr, params)
        o1, o2 = flow_time_batch(f.real, f.imag, 1.0, params)
        w = mass_push(o1 + 1j * o2, params)
        out = w.real / lam + 1j * (w.imag * lam)
    else:
        w = arr.real * lam + 1j * (arr.imag / lam)
        f = mass_push_inv(w, params)
        o1, o2 = flow_time_batch(f.real, f.imag, -1.0, params)
        out = mass_push(o1 + 1j * o2, params)
    if np.ndim(s) == 0:
        return complex(out) if np.ndim(out) == 0 else complex(out[()])
    return out


# ---------------------------------------------------------------------------
# Invariant density and the pulled-back Hamiltonian


def density_floor_constant(params: SlowdownParams) -> float:
    """The constant value of the invariant chart density near the branch
    point: (1/(1-alpha)) * (p/2)**(1 - 4/p - 2*alpha)."""
    p, a = params.p, params.alpha
    return (1.0 / (1.0 - a)) * (0.5 * p) ** (1.0 - 4.0 / p - 2.0 * a)


def invariant_density(z, params: SlowdownParams):
    """Density of the invariant area form relative to Lebesgue in the chart.

    Radial: with m the push profile and rr = m^{-1}((2/p)|z|^{p/2}),
    the density is |z|^{p-2} * rr / (taper(rr^2) * m'(rr) * m(rr)).  Below
    the pure-power radius this collapses exactly to density_floor_constant;
    at the branch point itself the density is the continuous limit, which is
    that same constant (the pullback is not pointwise defined there).  With
    the slow-down disabled the density is the flat cone value |z|^{p-2}.
    """
    arr = _as_complex(z)
    p, a = params.p, params.alpha
    r = np.abs(arr)
    if params.disabled:
        out = r ** (p - 2.0)
        return float(out) if np.ndim(z) == 0 else out
    prof = push_profile(params)
    s_meas = (2.0 / p) * r ** (0.5 * p)
    const = density_floor_constant(params)
    out = np.full(r.shape, const)
    outer = s_meas > math.exp(prof.pure_top)
    if np.any(outer):
        so = s_meas[outer]
        rr = prof.radius_inv(so)
        out[outer] = (r[outer] ** (p - 2.0) * rr
                      / (slow_factor(rr * rr, params)
                         * prof.radius_deriv(rr) * so))
    return float(out) if np.ndim(z) == 0 else out


def pulled_hamiltonian(z, params: SlowdownParams):
    """The conserved quantity of the slowed flow, pulled back to the chart
    through the sector coordinate and the inverse mass push."""
    arr = _as_complex(z)
    flat = np.atleast_1d(arr).ravel()
    j = sector_of(flat, params)
    s = sector_map(flat, j, params)
    f = mass_push_inv(s, params)
    out = f.real * f.imag * params.log_lam
    if np.ndim(z) == 0:
        return float(out[0])
    return out.reshape(arr.shape)


def scaling_radii(params: SlowdownParams, n: int = 10) -> np.ndarray:
    """Default radii for second_derivative_scaling: a log-spaced span inside
    the zone where the pulled-back Hamiltonian is an exact power law."""
    rho_pure = (0.5 * params.p * params.r1 ** params.push_exponent) ** (2.0 / params.p)
    return np.geomspace(rho_pure / 40.0, rho_pure / 2.5, n)


def second_derivative_scaling(params: SlowdownParams, radii,
                              step_scale: float = 1e-4) -> float:
    """Fitted growth exponent of radial second derivatives of the pulled-back
    Hamiltonian.

    For each radius rho the second derivative is computed by a central
    difference with step step_scale*rho along the direction bisecting the
    first sector wedge, and the slope of log|second difference| against
    log rho is returned.  The construction predicts slope 2/(1-alpha) - 2.

    Raises:
        ValueError: fewer than 8 radii, radii outside (0, rho1), or not
            spanning a decade.
        ConvergenceError: fewer than 3 usable second differences survive the
            finite-difference validity filter.
    """
    radii = np.asarray(radii, dtype=float)
    if radii.size < 8:
        raise ValueError("need at least 8 radii")
    if np.any(radii <= 0.0) or np.any(radii >= params.rho1):
        raise ValueError("radii must lie strictly between 0 and rho1")
    if np.max(radii) / np.min(radii) < 10.0:
        raise ValueError("radii must span at least a decade")
    direction = np.exp(1j * math.pi / (2.0 * params.p))
    h = step_scale * radii
    vals = pulled_hamiltonian(
        np.concatenate([(radii - h), radii, (radii + h)]) * direction, params)
    lo, mid, hi = np.split(vals, 3)
    diff2 = lo - 2.0 * mid + hi
    # A second difference buried under the rounding floor of the three function
    # values carries no slope information; drop it rather than fit noise.
    noise = 32.0 * np.finfo(float).eps * np.maximum(
        np.maximum(np.abs(lo), np.abs(hi)), 2.0 * np.abs(mid))
    usable = np.isfinite(diff2) & (np.abs(diff2) > noise)
    if int(np.sum(usable)) < 3:
        raise ConvergenceError("degenerate scaling fit: too few usable radii")
    second = diff2[usable] / h[usable] ** 2
    slope = np.polyfit(np.log(radii[usable]), np.log(np.abs(second)), 1)[0]
    return float(slope)


# ---------------------------------------------------------------------------
# Finite-difference Jacobians


def numeric_jacobian(fun, z, step: float | None = None, order: int = 2) -> np.ndarray:
    """Central-difference 2x2 Jacobian of a complex->complex map.

    Accepts a scalar z (returns shape (2, 2)) or an array (returns
    shape z.shape + (2, 2)); the default step is 1e-6 * max(1, |z|),
    elementwise.  order selects the stencil: 2 for the plain central
    difference, 4 for the five-point fourth-order one.  The fourth-order
    stencil is worth its extra cost where the map's third derivative is
    large (through the radial profile blend, truncation at order 2 can
    reach 1e-4 of the determinant; order 4 stays below 1e-8).
    """
    arr = _as_complex(z)
    h = step if step is not None else 1e-6 * np.maximum(1.0, np.abs(arr))
    if order == 2:
        dx = (np.asarray(fun(arr + h)) - np.asarray(fun(arr - h))) / (2.0 * h)
        dy = (np.asarray(fun(arr + 1j * h)) - np.asarray(fun(arr - 1j * h))) / (2.0 * h)
    elif order == 4:
        dx = (-np.asarray(fun(arr + 2.0 * h)) + 8.0 * np.asarray(fun(arr + h))
              - 8.0 * np.asarray(fun(arr - h)) + np.asarray(fun(arr - 2.0 * h))) / (12.0 * h)
        dy = (-np.asarray(fun(arr + 2j * h)) + 8.0 * np.asarray(fun(arr + 1j * h))
              - 8.0 * np.asarray(fun(arr - 1j * h)) + np.asarray(fun(arr - 2j * h))) / (12.0 * h)
    else:
        raise ValueError(f"unsupported stencil order {order}")
    jac = np.empty(np.shape(arr) + (2, 2))
    jac[..., 0, 0] = dx.real
    jac[..., 0, 1] = dy.real
    jac[..., 1, 0] = dx.imag
    jac[..., 1, 1] = dy.imag
    return jac
