"""Slow-down machinery in the plane.

The base system is the linear hyperbolic map (s1, s2) -> (lam*s1, s2/lam),
realized as the time-1 map of the vector field log(lam)*(s1, -s2).  This module
implements the time-reparametrized version: the field is multiplied by a radial
taper that vanishes at the origin like a power of the squared radius, turning
the hyperbolic fixed point into a neutral one while keeping the hyperbolas
s1*s2 = const invariant.  It owns the taper profile, the slowed flow and its
time-t map, the conserved product, and the decay exponents that the statistical
suites compare against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from numpy.polynomial.chebyshev import Chebyshev
from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.special import beta as _beta_fn, betainc as _betainc


class ConvergenceError(RuntimeError):
    """A quadrature or root-find failed to reach its tolerance."""


# --------------------------------------------------------------------------
# Parameters


@dataclass(frozen=True)
class SlowdownParams:
    """All construction constants for the slowed local model.

    The plane radii are derived from the chart radii by r = (2/p) * rho**(p/2);
    the taper is a pure power law for u <= r1**2 and identically 1 for
    u >= taper_end**2, with a smooth monotone blend in between.  The blend must
    finish well inside the disk of radius r0 so that a unit-time orbit segment
    touching the tapered region never reaches the chart boundary; this is
    enforced by requiring r0 >= 4 * lam * r1.

    Attributes:
        p: prong count of the local model (>= 3 on a surface; >= 1 for pure
            plane experiments).
        alpha: taper exponent in (0, 1).
        lam: dilation factor of the underlying linear map, > 1.
        rho0: chart radius of the slow-down neighborhood.
        rho1: chart radius of the inner (pure power) neighborhood.
        a_star: outer chart radius; the local pipeline must stay inside it.
        mu: spread parameter entering the decay exponent formulas, in (0, 1/2).
        disabled: if True the taper is identically 1 (control model).
    """

    p: int = 4
    alpha: float = 0.2
    lam: float = 2.0 + math.sqrt(3.0)
    rho0: float = 0.2
    rho1: float = 0.2 / (2.0 * math.sqrt(2.0 + math.sqrt(3.0)))
    a_star: float = 0.4
    mu: float = 0.25
    disabled: bool = False

    def __post_init__(self) -> None:
        if not (isinstance(self.p, int) and self.p >= 1):
            raise ValueError(f"p must be a positive integer, got {self.p!r}")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.lam > 1.0:
            raise ValueError(f"lam must exceed 1, got {self.lam}")
        if not (0.0 < self.mu < 0.5):
            raise ValueError(f"mu must lie in (0, 1/2), got {self.mu}")
        if not (0.0 < self.rho1 < self.rho0 < self.a_star):
            raise ValueError("need 0 < rho1 < rho0 < a_star")
        # Containment of the linear image/preimage disks in the chart domain:
        # the ellipse F(D_r) has long semi-axis lam*r, so both containments
        # reduce to radius comparisons.
        if self.r1 > self.r0 / self.lam + 1e-15:
            raise ValueError("containment D_r1 within F(D_r0) fails: r1 > r0/lam")
        if self.lam * self.r0 > self.a_tilde * (1.0 + 1e-15):
            raise ValueError("containment F^-1(D_r0) within D_a fails: lam*r0 > a_tilde")
        if self.r0 < 4.0 * self.lam * self.r1 * (1.0 - 1e-12):
            raise ValueError("taper headroom fails: need r0 >= 4*lam*r1")
        # The pure-power factor reaches 1 at radius 2/p; the blend must start
        # strictly below that point or no monotone interpolant to 1 exists.
        if self.r1 * self.p / 2.0 >= 1.0 - 1e-12:
            raise ValueError("inner radius too large: pure-power factor reaches 1")
        _check_taper_monotone(self)

    @property
    def r0(self) -> float:
        return (2.0 / self.p) * self.rho0 ** (self.p / 2.0)

    @property
    def r1(self) -> float:
        return (2.0 / self.p) * self.rho1 ** (self.p / 2.0)

    @property
    def a_tilde(self) -> float:
        return (2.0 / self.p) * self.a_star ** (self.p / 2.0)

    @property
    def taper_end(self) -> float:
        """Radius above which the taper is exactly 1."""
        return self.r0 / (2.0 * self.lam)

    @property
    def blend_end(self) -> float:
        """Radius where the taper blend actually finishes.

        Usually taper_end, but capped at 2/p: beyond that radius the
        pure-power factor exceeds 1 and a convex blend toward 1 would
        overshoot and lose monotonicity.  On [r1, blend_end] the power
        factor stays <= 1, so both terms of the blend derivative are
        nonnegative and the profile is provably nondecreasing.
        """
        return min(self.taper_end, 2.0 / self.p)

    @property
    def push_lo(self) -> float:
        """Radius where the mass-push profile starts blending to the identity.

        Placed just above the pure-power radius so the blend window is as
        wide as the containments allow (push_hi/push_lo >= 2.8): the blend
        bridges a large log-gap between the measured branch and the
        identity, and a narrow window would concentrate that bridge into
        violent higher derivatives that central-difference Jacobians of the
        local map cannot resolve.
        """
        return 1.1 * self.r1

    @property
    def push_hi(self) -> float:
        """Radius above which the mass-push profile is the identity.

        Kept at 0.78*r0/lam so that lam*push_hi < 0.8*r0: the local
        correction pipeline then provably cannot act on points whose chart
        radius exceeds the 0.8*r0 trigger (see charts module).
        """
        return 0.78 * self.r0 / self.lam

    @property
    def log_lam(self) -> float:
        return math.log(self.lam)

    @property
    def a_coeff(self) -> float:
        """Normalization of the mass-push map."""
        return ((1.0 - self.alpha) * (self.p / 2.0) ** (2.0 * self.alpha)) ** (self.p / 4.0)

    @property
    def push_exponent(self) -> float:
        """Exponent of the pure-power zone of the mass-push profile."""
        return self.p * (1.0 - self.alpha) / 2.0

    @property
    def eps_smooth(self) -> float:
        """Fractional part of 2/(1-alpha): the Holder surplus of the model."""
        x = 2.0 / (1.0 - self.alpha)
        return x - math.floor(x)

    @property
    def rate_const(self) -> float:
        """Coefficient of the closed-form axis solution.

        On the contracting axis inside the pure-power zone,
        s2(t) = s2(0) * (1 + rate_const * s2(0)**(2*alpha) * t)**(-1/(2*alpha)).
        """
        return 2.0 * self.alpha * self.log_lam * (self.p / 2.0) ** (2.0 * self.alpha)

    def control(self) -> "SlowdownParams":
        """The same parameters with the slow-down switched off."""
        return replace(self, disabled=True)


def plane_params(alpha: float = 0.2, mu: float = 0.25, r1: float = 0.3,
                 p: int = 4, lam: float = 2.0 + math.sqrt(3.0)) -> SlowdownParams:
    """Parameters for pure plane experiments, sized from the inner radius r1.

    The outer radii follow the construction rules r0 = 4*lam*r1 and
    a_tilde = 1.07*lam*r0, converted back to chart radii.
    """
    r0 = 4.0 * lam * r1
    a_tilde = 1.07 * lam * r0
    def rho(r: float) -> float:
        return (p * r / 2.0) ** (2.0 / p)
    return SlowdownParams(p=p, alpha=alpha, lam=lam, rho0=rho(r0),
                          rho1=rho(r1), a_star=rho(a_tilde), mu=mu)


def surface_params(alpha: float = 0.2, mu: float = 0.25, rho0: float = 0.2,
                   a_star: float = 0.4, lam: float = 2.0 + math.sqrt(3.0)) -> SlowdownParams:
    """Parameters for the reference surface charts (p = 4).

    rho1 is the largest value compatible with the taper headroom rule
    r1 = r0/(4*lam), i.e. rho1 = rho0 / (2*sqrt(lam)).
    """
    return SlowdownParams(p=4, alpha=alpha, lam=lam, rho0=rho0,
                          rho1=rho0 / (2.0 * math.sqrt(lam)), a_star=a_star, mu=mu)


# --------------------------------------------------------------------------
# Taper profile


def _bump(v: np.ndarray) -> np.ndarray:
    """The standard smooth step: 0 at v<=0, 1 at v>=1, C-infinity monotone."""
    v = np.clip(v, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        e0 = np.where(v > 0.0, np.exp(-1.0 / np.where(v > 0.0, v, 1.0)), 0.0)
        e1 = np.where(v < 1.0, np.exp(-1.0 / np.where(v < 1.0, 1.0 - v, 1.0)), 0.0)
    return e0 / (e0 + e1)


def _bump_scalar(v: float) -> float:
    if v <= 0.0:
        return 0.0
    if v >= 1.0:
        return 1.0
    e0 = math.exp(-1.0 / v)
    e1 = math.exp(-1.0 / (1.0 - v))
    return e0 / (e0 + e1)


def _bump_deriv_scalar(v: float) -> float:
    """d/dv of the smooth step; vanishes to all orders at 0 and 1."""
    if v <= 0.0 or v >= 1.0:
        return 0.0
    e0 = math.exp(-1.0 / v)
    e1 = math.exp(-1.0 / (1.0 - v))
    return e0 * e1 * (1.0 / v ** 2 + 1.0 / (1.0 - v) ** 2) / (e0 + e1) ** 2


def slow_factor(u, params: SlowdownParams):
    """The radial taper as a function of the squared radius u.

    Equals (p/2)**(2*alpha) * u**alpha for u <= r1**2, is identically 1 for
    u >= taper_end**2 (hence in particular for u >= r0**2), and blends
    smoothly and monotonically in between.

    Args:
        u: squared radius, scalar or array, nonnegative and finite.
        params: construction constants.

    Returns:
        The taper value(s), same shape as u.
    """
    arr = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0):
        raise ValueError("squared radius must be finite and nonnegative")
    if params.disabled:
        out = np.ones_like(arr)
        return float(out) if np.ndim(u) == 0 else out
    r1sq = params.r1 ** 2
    uhi = params.blend_end ** 2
    coeff = (params.p / 2.0) ** (2.0 * params.alpha)
    power = coeff * np.power(arr, params.alpha)
    v = (arr - r1sq) / (uhi - r1sq)
    chi = _bump(v)
    out = (1.0 - chi) * power + chi
    out = np.where(arr <= r1sq, power, out)
    out = np.where(arr >= uhi, 1.0, out)
    return float(out) if np.ndim(u) == 0 else out


def _slow_factor_scalar(u: float, params: SlowdownParams) -> float:
    """Scalar fast path of slow_factor, used inside quadrature loops."""
    if params.disabled:
        return 1.0
    r1sq = params.r1 * params.r1
    if u <= r1sq:
        return (params.p / 2.0) ** (2.0 * params.alpha) * u ** params.alpha
    uhi = params.blend_end * params.blend_end
    if u >= uhi:
        return 1.0
    chi = _bump_scalar((u - r1sq) / (uhi - r1sq))
    power = (params.p / 2.0) ** (2.0 * params.alpha) * u ** params.alpha
    return (1.0 - chi) * power + chi


def _check_taper_monotone(params: SlowdownParams) -> None:
    """Hard construction-time check that the blended taper is nondecreasing."""
    if params.disabled:
        return
    lo, hi = params.r1 ** 2, params.taper_end ** 2
    grid = np.linspace(lo * 0.5, hi * 1.25, 10_000)
    vals = slow_factor(grid, params)
    if np.min(np.diff(vals)) < -1e-12:
        raise ValueError("taper blend is not monotone for these parameters")


# --------------------------------------------------------------------------
# Antiderivative of 1/taper (needed by the mass-push profile)


class _PiecewiseAntideriv:
    """Cumulative integral of a smooth function, per-chunk Chebyshev series.

    Stores, for each chunk [x_k, x_{k+1}], the Chebyshev antiderivative of the
    integrand, plus compensated cumulative offsets, so that __call__(x) returns
    the integral from the first breakpoint to x.
    """

    def __init__(self, fun, breakpoints, degree: int = 64):
        self.breaks = np.asarray(breakpoints, dtype=float)
        if self.breaks.ndim != 1 or len(self.breaks) < 2 or np.any(np.diff(self.breaks) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        self._polys = []
        self._lovals = []
        offsets = [0.0]
        for lo, hi in zip(self.breaks[:-1], self.breaks[1:]):
            poly = Chebyshev.interpolate(fun, degree, domain=[lo, hi]).integ()
            self._polys.append(poly)
            self._lovals.append(float(poly(lo)))
            offsets.append(offsets[-1] + float(poly(hi)) - self._lovals[-1])
        self.offsets = np.asarray(offsets[:-1])
        self.total = offsets[-1]

    def __call__(self, x):
        arr = np.asarray(x, dtype=float)
        scalar = arr.ndim == 0
        arr = np.atleast_1d(arr)
        idx = np.clip(np.searchsorted(self.breaks, arr, side="right") - 1,
                      0, len(self._polys) - 1)
        out = np.empty_like(arr)
        for k in np.unique(idx):
            m = idx == k
            out[m] = self._polys[k](arr[m]) - self._lovals[k] + self.offsets[k]
        out = np.where(arr <= self.breaks[0], 0.0, out)
        out = np.where(arr >= self.breaks[-1], self.total, out)
        return float(out[0]) if scalar else out


@lru_cache(maxsize=64)
def _taper_integral_table(params: SlowdownParams) -> _PiecewiseAntideriv:
    """Antiderivative of 1/taper over the blend zone [r1**2, blend_end**2]."""
    def integrand(u):
        return 1.0 / slow_factor(u, params)
    lo, hi = params.r1 ** 2, params.blend_end ** 2
    breaks = np.concatenate([np.linspace(lo, hi, 17)])
    return _PiecewiseAntideriv(integrand, breaks, degree=256)


def taper_antideriv(big_r, params: SlowdownParams):
    """Integral of 1/taper from 0 to big_r (squared-radius variable).

    Closed form in the pure-power zone, tabulated over the blend zone, linear
    above it.  Vectorized over big_r.
    """
    arr = np.asarray(big_r, dtype=float)
    if np.any(arr < 0.0) or not np.all(np.isfinite(arr)):
        raise ValueError("argument must be finite and nonnegative")
    if params.disabled:
        out = arr.copy()
        return float(out) if np.ndim(big_r) == 0 else out
    a = params.alpha
    coeff = (2.0 / params.p) ** (2.0 * a)
    r1sq = params.r1 ** 2
    rmsq = params.blend_end ** 2
    pure = coeff * np.power(np.minimum(arr, r1sq), 1.0 - a) / (1.0 - a)
    table = _taper_integral_table(params)
    mid = table(np.clip(arr, r1sq, rmsq))
    top = np.maximum(arr - rmsq, 0.0)
    out = pure + mid + top
    return float(out) if np.ndim(big_r) == 0 else out


# --------------------------------------------------------------------------
# Decay exponents


@dataclass(frozen=True)
class DecayExponents:
    """Polynomial decay exponents as functions of (alpha, mu).

    gamma and gamma_prime drive all statistical predictions: return tails decay
    between n**-(gamma-1) and n**-(gamma_prime-1), correlations between
    n**-(gamma-2) and n**-(gamma_prime-2).  beta, beta1, beta2 are the
    auxiliary deviation-growth exponents; they satisfy
    gamma = beta1 + 1/(2*alpha) and gamma_prime = beta + 1/(2*alpha).
    """

    gamma: float
    gamma_prime: float
    beta: float
    beta1: float
    beta2: float


def decay_exponents(alpha: float, mu: float) -> DecayExponents:
    """Evaluate the decay exponents for a given taper exponent and spread.

    Args:
        alpha: taper exponent in (0, 1).
        mu: spread parameter in (0, 1).

    Returns:
        The exponent record; gamma > gamma_prime > 2 whenever alpha < 1/4 and
        mu < 1/2.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if not (0.0 < mu < 1.0):
        raise ValueError(f"mu must lie in (0, 1), got {mu}")
    beta = (1.0 - mu) / 2.0 ** (alpha + 2.0)
    beta1 = (1.0 + mu) * 2.0 ** (alpha - 1.0) + (1.0 - mu) / 6.0
    inv = 1.0 / (2.0 * alpha)
    return DecayExponents(gamma=inv + beta1, gamma_prime=inv + beta,
                          beta=beta, beta1=beta1, beta2=beta1 + 2.0)


# --------------------------------------------------------------------------
# Conserved quantities


def hamiltonian(s1: float, s2: float, params: SlowdownParams) -> float:
    """The conserved product s1*s2 scaled by log(lam).

    Both the linear map and the slowed flow preserve it exactly.
    """
    if not (math.isfinite(s1) and math.isfinite(s2)):
        raise ValueError("coordinates must be finite")
    return s1 * s2 * params.log_lam


# --------------------------------------------------------------------------
# Axis (1D) dynamics: closed form plus a small cached blend-zone clock


@lru_cache(maxsize=64)
def _axis_blend_clock(params: SlowdownParams) -> _PiecewiseAntideriv:
    """Antiderivative of (1/taper(e^{2E}) - 1) over E in [log r1, log blend_end]."""
    def integrand(e):
        u = np.exp(2.0 * np.asarray(e, dtype=float))
        return 1.0 / slow_factor(u, params) - 1.0
    lo, hi = math.log(params.r1), math.log(params.blend_end)
    return _PiecewiseAntideriv(integrand, np.linspace(lo, hi, 9), degree=96)


def _axis_expand(a: float, t: float, params: SlowdownParams) -> float:
    """Radius after expanding for time t >= 0 along the growing axis."""
    if a == 0.0:
        return 0.0
    loglam = params.log_lam
    twoa = 2.0 * params.alpha
    c0 = params.rate_const
    r1, rm = params.r1, params.blend_end
    rem = t
    r = a
    if r < r1:
        t_pure = (r ** -twoa - r1 ** -twoa) / c0
        if rem <= t_pure:
            return (r ** -twoa - c0 * rem) ** (-1.0 / twoa)
        rem -= t_pure
        r = r1
    if r < rm:
        clock = _axis_blend_clock(params)
        ea, em = math.log(r), math.log(rm)
        ka = clock(ea)
        t_blend = ((em - ea) + clock(em) - ka) / loglam
        if rem <= t_blend:
            target = rem * loglam + ea + ka
            e = brentq(lambda x: x + clock(x) - target, ea, em,
                       xtol=1e-15, rtol=8.9e-16)
            return math.exp(e)
        rem -= t_blend
        r = rm
    return r * math.exp(loglam * rem)


def _axis_contract(a: float, t: float, params: SlowdownParams) -> float:
    """Radius after contracting for time t >= 0 along the shrinking axis."""
    if a == 0.0:
        return 0.0
    loglam = params.log_lam
    twoa = 2.0 * params.alpha
    c0 = params.rate_const
    r1, rm = params.r1, params.blend_end
    rem = t
    r = a
    if r > rm:
        t_free = math.log(r / rm) / loglam
        if rem <= t_free:
            return r * math.exp(-loglam * rem)
        rem -= t_free
        r = rm
    if r > r1:
        clock = _axis_blend_clock(params)
        eb, e1 = math.log(r), math.log(r1)
        kb = clock(eb)
        t_blend = ((eb - e1) + kb - clock(e1)) / loglam
        if rem <= t_blend:
            target = eb + kb - rem * loglam
            e = brentq(lambda x: x + clock(x) - target, e1, eb,
                       xtol=1e-15, rtol=8.9e-16)
            return math.exp(e)
        rem -= t_blend
        r = r1
    return (r ** -twoa + c0 * rem) ** (-1.0 / twoa)


def axis_decay(s0: float, t: float, params: SlowdownParams) -> float:
    """Closed-form contracting-axis radius, valid while the orbit stays in the
    pure-power zone (s0 <= r1): s0 * (1 + rate_const * s0**(2*alpha) * t)**(-1/(2*alpha))."""
    twoa = 2.0 * params.alpha
    return s0 * (1.0 + params.rate_const * s0 ** twoa * t) ** (-1.0 / twoa)


# --------------------------------------------------------------------------
# The slowed flow: time-t map


def _u_of_xi(xi: float, logc: float) -> float:
    """Squared radius along the hyperbola, u = e^{2 xi} + c^2 e^{-2 xi}."""
    return math.exp(2.0 * xi) + math.exp(2.0 * (logc - xi))


def _solve_step(xi0: float, delta_total: float, logc: float, xic: float,
                xim: float, params: SlowdownParams) -> float:
    """Solve delta + I(delta) = delta_total for the log-coordinate advance.

    I(delta) integrates (1/taper - 1) over the orbit's log-coordinate range
    clipped to the taper support; the left side is strictly increasing with
    derivative 1/taper >= 1, so a bracketed Newton iteration is safe.
    """
    support_lo = xic - xim
    support_hi = xic + xim

    def extra(delta: float) -> float:
        a = max(xi0, support_lo)
        b = min(xi0 + delta, support_hi)
        if b <= a:
            return 0.0
        val, err = quad(lambda x: 1.0 / _slow_factor_scalar(_u_of_xi(x, logc), params) - 1.0,
                        a, b, epsabs=1e-14, epsrel=1e-11, limit=200)
        if err > 1e-8 * max(1.0, abs(val)) + 1e-10:
            raise ConvergenceError(f"quadrature error {err:.2e} too large on [{a}, {b}]")
        return val

    lo, hi = 0.0, delta_total
    delta = delta_total
    tol = 1e-13 * max(1.0, delta_total)
    prev_abs = math.inf
    for _ in range(120):
        h = delta + extra(delta) - delta_total
        if abs(h) <= tol:
            return delta
        if h > 0.0:
            hi = delta
        else:
            lo = delta
        taper_here = _slow_factor_scalar(_u_of_xi(xi0 + delta, logc), params)
        newton = delta - h * taper_here
        inside = lo < newton < hi
        if hi - lo <= 1e-16 * max(1.0, abs(delta)):
            # Bracket exhausted; one clamped Newton polish squeezes the
            # residual below what the bracket width alone guarantees.
            return newton if inside else 0.5 * (lo + hi)
        # The local slope can misestimate the secant slope badly enough to
        # cycle between the bracket ends, so fall back to bisection whenever
        # the residual fails to halve; this keeps the shrinkage geometric.
        if inside and abs(h) < 0.5 * prev_abs:
            delta = newton
        else:
            delta = 0.5 * (lo + hi)
        prev_abs = abs(h)
    raise ConvergenceError("time-step solve did not converge")


_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gl_nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


def _cosh_power_antideriv(tau: float, alpha: float) -> float:
    """Exact odd antiderivative of cosh(x)**(-alpha), evaluated at tau.

    Written through the complement of the regularized incomplete beta so that
    large tau loses no precision: with y = sech(tau)**2,
    integral_0^tau = (1/2) * B(1/2, alpha/2) * (1 - I_y(alpha/2, 1/2)).
    """
    if tau == 0.0:
        return 0.0
    sign = 1.0 if tau > 0.0 else -1.0
    t = min(abs(tau), 350.0)
    y = 1.0 / math.cosh(t) ** 2
    return sign * 0.5 * _beta_fn(0.5, 0.5 * alpha) * (1.0 - _betainc(0.5 * alpha, 0.5, y))


def _taper_time_integral(a: float, b: float, logc: float,
                         params: SlowdownParams, n: int) -> float:
    """Integral of (1/taper(u(xi)) - 1) over [a, b] along the orbit s1*s2 = c.

    The pure-power zone contributes in closed form (incomplete beta); the
    blend-zone pieces are narrow (width <= log(blend_end/r1) each side) and
    use fixed-order Gauss-Legendre, chunked so no panel exceeds width 1.2.
    """
    if b <= a:
        return 0.0
    xic = 0.5 * logc
    twoc = 2.0 * math.exp(logc)
    r1sq = params.r1 ** 2
    alpha = params.alpha
    d1 = 0.5 * math.acosh(r1sq / twoc) if r1sq > twoc else 0.0

    total = 0.0
    if d1 > 0.0:
        pa, pb = max(a, xic - d1), min(b, xic + d1)
        if pb > pa:
            coeff = (2.0 / params.p) ** (2.0 * alpha) * twoc ** -alpha
            kk = (_cosh_power_antideriv(2.0 * (pb - xic), alpha)
                  - _cosh_power_antideriv(2.0 * (pa - xic), alpha))
            total += 0.5 * coeff * kk - (pb - pa)
        pieces = [(a, min(b, xic - d1)), (max(a, xic + d1), b)]
    else:
        # the orbit bottom is already in the blend zone; split there so each
        # quadrature piece is one-signed in d(u)/d(xi)
        pieces = [(a, min(b, xic)), (max(a, xic), b)]

    panels = []
    for lo, hi in pieces:
        if hi <= lo:
            continue
        k = max(1, math.ceil((hi - lo) / 1.2))
        edges = np.linspace(lo, hi, k + 1)
        panels.extend(zip(edges[:-1], edges[1:]))
    if panels:
        nodes, weights = _gl_nodes(n)
        los = np.array([p[0] for p in panels])
        his = np.array([p[1] for p in panels])
        half = 0.5 * (his - los)
        xs = los[:, None] + half[:, None] * (nodes[None, :] + 1.0)
        u = np.exp(2.0 * xs) + np.exp(2.0 * (logc - xs))
        vals = 1.0 / slow_factor(u, params) - 1.0
        total += float(np.dot(half, vals @ weights))
    return total


def _solve_step_fast(xi0: float, delta_total: float, logc: float, xic: float,
                     xim: float, params: SlowdownParams) -> float:
    """Like _solve_step but with the exact-plus-Gauss integral; verifies the
    accepted solution against a higher quadrature order and raises
    ConvergenceError on disagreement so the caller can fall back."""
    support_lo = xic - xim
    support_hi = xic + xim

    def extra(delta: float, n: int) -> float:
        return _taper_time_integral(max(xi0, support_lo),
                                    min(xi0 + delta, support_hi),
                                    logc, params, n)

    lo, hi = 0.0, delta_total
    delta = delta_total
    # Near-machine residual: central-difference Jacobians of downstream maps
    # divide position noise by the step, so slack here would surface there.
    tol = 1e-14 * max(1.0, delta_total)
    prev_abs = math.inf
    for _ in range(120):
        h = delta + extra(delta, 64) - delta_total
        stalled = hi - lo <= 1e-16 * max(1.0, abs(delta))
        if abs(h) <= tol or stalled:
            if abs(h) > tol:
                taper_here = _slow_factor_scalar(_u_of_xi(xi0 + delta, logc), params)
                newton = delta - h * taper_here
                delta = newton if lo < newton < hi else 0.5 * (lo + hi)
            check = extra(delta, 96) - extra(delta, 64)
            if abs(check) > 1e-11 * max(1.0, delta_total):
                raise ConvergenceError("fast quadrature self-check failed")
            return delta
        if h > 0.0:
            hi = delta
        else:
            lo = delta
        taper_here = _slow_factor_scalar(_u_of_xi(xi0 + delta, logc), params)
        newton = delta - h * taper_here
        # Bisect whenever the residual fails to halve: the local slope can
        # cycle the iterate between the bracket ends otherwise.
        if lo < newton < hi and abs(h) < 0.5 * prev_abs:
            delta = newton
        else:
            delta = 0.5 * (lo + hi)
        prev_abs = abs(h)
    raise ConvergenceError("fast time-step solve did not converge")


class _OrbitClock:
    """Time parametrization of a single hyperbola orbit s1*s2 = c > 0.

    The advance in the log coordinate xi = log s1 satisfies
    loglam * t = (xi_b - xi_a) + J(xi_b) - J(xi_a), where J integrates
    (1/taper - 1); J is odd around xi_c = log(sqrt(c)) with support
    [xi_c - xi_m, xi_c + xi_m].  The half-integral is stored as piecewise
    Chebyshev antiderivatives split at the squared-radius decades and at the
    taper's non-analytic junctions.
    """

    def __init__(self, c: float, params: SlowdownParams):
        self.c = c
        self.params = params
        self.logc = math.log(c)
        self.xic = 0.5 * self.logc
        self.loglam = params.log_lam
        rmsq = params.blend_end ** 2
        r1sq = params.r1 ** 2
        ratio = rmsq / (2.0 * c)
        if ratio <= 1.0:
            raise ValueError("orbit never enters the taper support")
        self.xim = 0.5 * math.acosh(ratio)

        u_levels = [2.0 * c]
        if r1sq > 2.0 * c:
            n_dec = math.log10(r1sq / (2.0 * c))
            n1 = min(120, max(1, math.ceil(2.0 * n_dec)))
            u_levels += [2.0 * c * (r1sq / (2.0 * c)) ** (k / n1) for k in range(1, n1 + 1)]
        lo_blend = max(2.0 * c, r1sq)
        u_levels += [lo_blend * (rmsq / lo_blend) ** (k / 4) for k in range(1, 5)]
        d_breaks = [0.0]
        for u in u_levels[1:]:
            d = 0.5 * math.acosh(min(u, rmsq) / (2.0 * c))
            if d > d_breaks[-1] + 1e-14:
                d_breaks.append(d)
        if len(d_breaks) == 1:
            d_breaks.append(self.xim)
        else:
            d_breaks[-1] = self.xim

        logc = self.logc
        xic = self.xic

        def integrand(d):
            d = np.asarray(d, dtype=float)
            u = np.exp(2.0 * (xic + d)) + np.exp(2.0 * (logc - xic - d))
            return 1.0 / slow_factor(u, params) - 1.0

        self._half = _PiecewiseAntideriv(integrand, d_breaks, degree=64)
        self.j_inf = self._half.total

    def j(self, xi):
        """The odd cumulative integral J at log-coordinate xi (vectorized)."""
        d = np.asarray(xi, dtype=float) - self.xic
        out = np.sign(d) * self._half(np.abs(d))
        return float(out) if np.ndim(xi) == 0 else out

    def warp(self, xi):
        """The strictly increasing reparametrization W(xi) = xi + J(xi)."""
        return np.asarray(xi, dtype=float) + self.j(xi)

    def time_between(self, xi_a: float, xi_b: float) -> float:
        return (float(self.warp(xi_b)) - float(self.warp(xi_a))) / self.loglam

    def advance(self, xi0: float, t: float) -> float:
        """The log coordinate after flowing for time t from xi0."""
        return float(self.positions(xi0, np.asarray([t]))[0])

    def positions(self, xi0: float, times: np.ndarray) -> np.ndarray:
        """Log coordinates after flowing from xi0 for each time in `times`.

        Solves W(xi) = W(xi0) + loglam*t for each target by bracketed vector
        Newton between the table knots.
        """
        times = np.asarray(times, dtype=float)
        targets = float(self.warp(xi0)) + self.loglam * times
        knots_d = self._half.breaks
        knots = np.concatenate([self.xic - knots_d[::-1], self.xic + knots_d[1:]])
        warp_knots = self.warp(knots)

        xi = np.empty_like(targets)
        below = targets <= warp_knots[0]
        above = targets >= warp_knots[-1]
        xi[below] = targets[below] + self.j_inf
        xi[above] = targets[above] - self.j_inf
        mid = ~(below | above)
        if np.any(mid):
            tg = targets[mid]
            hi_idx = np.searchsorted(warp_knots, tg)
            lo_b = knots[hi_idx - 1].copy()
            hi_b = knots[hi_idx].copy()
            wlo = warp_knots[hi_idx - 1]
            whi = warp_knots[hi_idx]
            x = lo_b + (hi_b - lo_b) * (tg - wlo) / (whi - wlo)
            for _ in range(60):
                w = self.warp(x)
                resid = w - tg
                if np.all(np.abs(resid) <= 1e-12):
                    break
                shrink = resid > 0.0
                hi_b = np.where(shrink, x, hi_b)
                lo_b = np.where(shrink, lo_b, x)
                u = np.exp(2.0 * x) + np.exp(2.0 * (self.logc - x))
                step = resid * slow_factor(u, self.params)
                cand = x - step
                bad = (cand <= lo_b) | (cand >= hi_b)
                x = np.where(bad, 0.5 * (lo_b + hi_b), cand)
            else:
                raise ConvergenceError("orbit clock inversion did not converge")
            xi[mid] = x
        return xi


@lru_cache(maxsize=512)
def _orbit_clock(c: float, params: SlowdownParams) -> _OrbitClock:
    return _OrbitClock(c, params)


def orbit_clock(s1: float, s2: float, params: SlowdownParams) -> _OrbitClock:
    """The cached time parametrization of the hyperbola through (s1, s2).

    Requires s1*s2 != 0 and an orbit that actually meets the taper support.
    """
    c = abs(s1) * abs(s2)
    if c == 0.0:
        raise ValueError("axis orbits have no hyperbola clock")
    return _orbit_clock(c, params)


def flow_map(s1: float, s2: float, t: float, params: SlowdownParams) -> tuple[float, float]:
    """The time-t map of the slowed flow.

    The product s1*s2 and the quadrant are preserved exactly; negative t uses
    the coordinate-swap time symmetry.  Orbits whose log-coordinate range never
    meets the taper support are advanced by the exact linear map.

    Args:
        s1, s2: starting coordinates (finite).
        t: flow time, any finite real.
        params: construction constants.

    Returns:
        The pair (s1(t), s2(t)).

    Raises:
        ConvergenceError: if an internal quadrature or root-find fails.
    """
    if not (math.isfinite(s1) and math.isfinite(s2) and math.isfinite(t)):
        raise ValueError("inputs must be finite")
    if t == 0.0:
        return (float(s1), float(s2))
    if params.disabled:
        fac = params.lam ** t
        return (s1 * fac, s2 / fac)
    if t < 0.0:
        y1, y2 = flow_map(s2, s1, -t, params)
        return (y2, y1)

    sg1 = 1.0 if s1 >= 0.0 else -1.0
    sg2 = 1.0 if s2 >= 0.0 else -1.0
    a1, a2 = abs(s1), abs(s2)
    c = a1 * a2

    if c == 0.0:
        # True axis orbits, or a product that underflows: evolve the dominant
        # coordinate in 1D and scale the other by the reciprocal factor.
        if a1 == 0.0 and a2 == 0.0:
            return (0.0, 0.0)
        if a2 >= a1:
            n2 = _axis_contract(a2, t, params)
            n1 = a1 * (a2 / n2) if a1 > 0.0 else 0.0
        else:
            n1 = _axis_expand(a1, t, params)
            n2 = a2 * (a1 / n1) if a2 > 0.0 else 0.0
        return (sg1 * n1, sg2 * n2)

    loglam = params.log_lam
    logc = math.log(c)
    xic = 0.5 * logc
    xi0 = math.log(a1)
    delta_total = loglam * t
    rmsq = params.blend_end ** 2

    if xic <= xi0:
        umin = _u_of_xi(xi0, logc)
    elif xic >= xi0 + delta_total:
        umin = _u_of_xi(xi0 + delta_total, logc)
    else:
        umin = 2.0 * c
    if umin >= rmsq:
        fac = math.exp(delta_total)
        return (sg1 * a1 * fac, sg2 * a2 / fac)

    span_decades = math.log10(rmsq / (2.0 * c)) if c > 0.0 else math.inf
    if delta_total <= 3.0 or span_decades > 60.0 or rmsq <= 2.0 * c * (1.0 + 1e-9):
        ratio = rmsq / (2.0 * c)
        xim = 0.5 * math.acosh(ratio) if math.isfinite(ratio) else math.inf
        try:
            delta = _solve_step_fast(xi0, delta_total, logc, xic, xim, params)
        except ConvergenceError:
            delta = _solve_step(xi0, delta_total, logc, xic, xim, params)
    else:
        clock = _orbit_clock(c, params)
        delta = clock.advance(xi0, t) - xi0
    fac = math.exp(delta)
    return (sg1 * a1 * fac, sg2 * a2 / fac)


def _cosh_power_antideriv_vec(tau: np.ndarray, alpha: float) -> np.ndarray:
    """Vectorized form of _cosh_power_antideriv."""
    t = np.minimum(np.abs(tau), 350.0)
    y = 1.0 / np.cosh(t) ** 2
    k = 0.5 * _beta_fn(0.5, 0.5 * alpha) * (1.0 - _betainc(0.5 * alpha, 0.5, y))
    return np.copysign(k, tau)


@lru_cache(maxsize=64)
def _blend_rate_spline(params: SlowdownParams):
    """Cubic-spline table of (1/taper - 1) on the blend zone [r1**2, blend_end**2].

    Dense enough (8001 knots) that the interpolation error is far below the
    batch solver tolerance; evaluating the piecewise cubic is much cheaper
    than the fractional powers and exponentials of the defining formula, and
    the batch quadrature nodes always live inside this interval.
    """
    from scipy.interpolate import CubicSpline
    lo, hi = params.r1 ** 2, params.blend_end ** 2
    x = np.linspace(lo, hi, 8001)
    y = 1.0 / slow_factor(x, params) - 1.0
    return CubicSpline(x, y)


def flow_time_batch(s1, s2, t: float, params: SlowdownParams):
    """Vectorized time-t map of the slowed field.

    Elementwise equivalent to flow_map, but all the log-coordinate advances
    are solved by one masked Newton iteration over the batch: the pure-power
    part of the time integral is exact (incomplete beta) and each blend-zone
    piece is a single Gauss-Legendre panel (their log-width is bounded by
    acosh(blend_end**2/r1**2)/2 < 1.1).  Axis points and any solver failures
    fall back to the scalar path.

    Args:
        s1, s2: coordinates, broadcastable arrays.
        t: single time for the whole batch.
        params: construction constants.

    Returns:
        Pair of arrays with the broadcast shape.
    """
    a = np.atleast_1d(np.asarray(s1, dtype=float))
    b = np.atleast_1d(np.asarray(s2, dtype=float))
    a, b = np.broadcast_arrays(a, b)
    a = a.copy()
    b = b.copy()
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and math.isfinite(t)):
        raise ValueError("coordinates and time must be finite")
    scalar_in = np.ndim(s1) == 0 and np.ndim(s2) == 0

    def _pack(o1, o2):
        if scalar_in:
            return float(o1[0]), float(o2[0])
        return o1, o2

    if t == 0.0:
        return _pack(a, b)
    if params.disabled:
        fac = params.lam ** t
        return _pack(a * fac, b / fac)
    if t < 0.0:
        o1, o2 = flow_time_batch(b, a, -t, params)
        return o2, o1

    sg1 = np.where(a >= 0.0, 1.0, -1.0)
    sg2 = np.where(b >= 0.0, 1.0, -1.0)
    a1 = np.abs(a)
    a2 = np.abs(b)
    out1 = np.empty_like(a1)
    out2 = np.empty_like(a2)

    axis = (a1 == 0.0) | (a2 == 0.0)
    for idx in np.flatnonzero(axis):
        out1[idx], out2[idx] = flow_map(a[idx], b[idx], t, params)

    gen = np.flatnonzero(~axis)
    if gen.size == 0:
        return _pack(out1, out2)

    loglam = params.log_lam
    delta_total = loglam * t
    rmsq = params.blend_end ** 2
    r1sq = params.r1 ** 2
    alpha = params.alpha

    g1 = a1[gen]
    g2 = a2[gen]
    c = g1 * g2
    logc = np.log(c)
    xic = 0.5 * logc
    xi0 = np.log(g1)

    umin = np.where(xic <= xi0, np.exp(2.0 * xi0) + np.exp(2.0 * (logc - xi0)),
                    np.where(xic >= xi0 + delta_total,
                             np.exp(2.0 * (xi0 + delta_total))
                             + np.exp(2.0 * (logc - xi0 - delta_total)),
                             2.0 * c))
    fast = umin >= rmsq
    delta = np.full(gen.size, delta_total)

    act = np.flatnonzero(~fast)
    if act.size:
        xi0a = xi0[act]
        xica = xic[act]
        logca = logc[act]
        twoc = 2.0 * np.exp(logca)
        d1 = np.where(r1sq > twoc, 0.5 * np.arccosh(np.maximum(r1sq / twoc, 1.0)), 0.0)
        dm = 0.5 * np.arccosh(np.maximum(rmsq / twoc, 1.0))
        sup_lo = xica - dm
        sup_hi = xica + dm
        coeff = (2.0 / params.p) ** (2.0 * alpha) * twoc ** -alpha
        nodes, weights = _gl_nodes(64)
        rate = _blend_rate_spline(params)

        def integral(dl: np.ndarray, ix: np.ndarray) -> np.ndarray:
            ia = np.maximum(xi0a[ix], sup_lo[ix])
            ib = np.minimum(xi0a[ix] + dl, sup_hi[ix])
            ib = np.maximum(ib, ia)
            pa = np.maximum(ia, xica[ix] - d1[ix])
            pb = np.minimum(ib, xica[ix] + d1[ix])
            pb = np.maximum(pb, pa)
            kk = (_cosh_power_antideriv_vec(2.0 * (pb - xica[ix]), alpha)
                  - _cosh_power_antideriv_vec(2.0 * (pa - xica[ix]), alpha))
            tot = 0.5 * coeff[ix] * kk - (pb - pa)
            # blend pieces [ia, min(ib, xic-d1)] and [max(ia, xic+d1), ib];
            # when d1 = 0 these meet at the orbit bottom
            for lo, hi in ((ia, np.minimum(ib, xica[ix] - d1[ix])),
                           (np.maximum(ia, xica[ix] + d1[ix]), ib)):
                hi = np.maximum(hi, lo)
                half = 0.5 * (hi - lo)
                xs = lo[:, None] + half[:, None] * (nodes[None, :] + 1.0)
                u = np.exp(2.0 * xs) + np.exp(2.0 * (logca[ix][:, None] - xs))
                np.clip(u, r1sq, rmsq, out=u)
                vals = rate(u)
                tot += half * (vals @ weights)
            return tot

        dl = np.full(act.size, delta_total)
        lo_b = np.zeros(act.size)
        hi_b = np.full(act.size, delta_total)
        prev_abs = np.full(act.size, np.inf)
        # near-machine residual so finite differences through this map keep
        # their noise floor well below truncation error
        tol = 1e-14 * max(1.0, delta_total)
        ix = np.arange(act.size)
        for _ in range(120):
            h = dl[ix] + integral(dl[ix], ix) - delta_total
            tight = (hi_b[ix] - lo_b[ix]) <= 1e-15 * np.maximum(1.0, np.abs(dl[ix]))
            done = (np.abs(h) <= tol) | tight
            dl[ix[tight]] = 0.5 * (lo_b[ix[tight]] + hi_b[ix[tight]])
            keep = ~done
            ix = ix[keep]
            if ix.size == 0:
                break
            h = h[keep]
            lo_b[ix] = np.where(h < 0.0, dl[ix], lo_b[ix])
            hi_b[ix] = np.where(h > 0.0, dl[ix], hi_b[ix])
            u_here = (np.exp(2.0 * (xi0a[ix] + dl[ix]))
                      + np.exp(2.0 * (logca[ix] - xi0a[ix] - dl[ix])))
            cand = dl[ix] - h * slow_factor(np.maximum(u_here, 1e-300), params)
            # bisect out-of-bracket candidates and points whose residual
            # failed to halve (the local slope can cycle the iterate)
            bad = (~((cand > lo_b[ix]) & (cand < hi_b[ix]))
                   | (np.abs(h) >= 0.5 * prev_abs[ix]))
            dl[ix] = np.where(bad, 0.5 * (lo_b[ix] + hi_b[ix]), cand)
            prev_abs[ix] = np.abs(h)
        if ix.size:
            # scalar fallback for stragglers
            for k in ix:
                gi = gen[act[k]]
                r1v, r2v = flow_map(float(a[gi]), float(b[gi]), t, params)
                av = abs(r1v)
                dl[k] = math.log(av / a1[gi]) if av > 0.0 else 0.0
        delta[act] = dl

    fac = np.exp(delta)
    out1[gen] = sg1[gen] * g1 * fac
    out2[gen] = sg2[gen] * g2 / fac
    return _pack(out1, out2)
