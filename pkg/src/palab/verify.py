"""Direct numerical checks of the slowed flow's crossing estimates and of
the stable-curve length sandwich on the surface.

Three suites:

* Crossing bounds: along one crossing of the pure-power disk, each
  coordinate obeys explicit two-sided power-law decay bounds with the
  constant ``C0 = 2*alpha*log(lam)*(p/2)**(2*alpha)``; the suite checks
  them pointwise over every admissible anchor pair of a sampled time grid.
* Pair spread: for an admissible pair of nearby crossings, the explicit
  deviation envelopes, the end-to-end deviation bound, and the fitted
  power-law decay envelopes between entry and midpoint.  Population
  envelopes stand in for the construction's existential constants, so the
  content checked is uniformity (stability across disjoint populations),
  plus an explicit admissible floor for the lower constant.
* Length ratio: short stable polylines driven through a singular disk on
  the surface contract between entry and exit by a polynomially slowed
  factor; with the slow-down disabled the factor is exactly
  ``lam**-(m-n)``, which the suite must flag as violating the polynomial
  envelopes.

Margins are relative (normalized by the bound's own magnitude), so a
single tolerance serves coordinate values spanning several decades.
Nonnegative margins mean the bound holds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .slowdown import (
    SlowdownParams,
    decay_exponents,
    orbit_clock,
    slow_factor,
)
from .surface import (
    ReferenceModel,
    global_map_batch,
    nearest_chart,
    transport_parity,
)

logger = logging.getLogger(__name__)

#: Worst relative margin still counted as a pass for explicit bounds.
MARGIN_TOLERANCE = -1e-9

#: Cap on pairwise anchor grids: full O(n^2) checks run on at most this
#: many symmetric subsample indices per record.
_PAIRWISE_CAP = 513


def crossing_constant(params: SlowdownParams) -> float:
    """The decay constant 2*alpha*log(lam)*(p/2)**(2*alpha) of the
    pure-zone crossing bounds."""
    return (2.0 * params.alpha * params.log_lam
            * (0.5 * params.p) ** (2.0 * params.alpha))


def initial_ratio_cap(mu: float) -> float:
    """Largest admissible initial relative offset of a spread pair."""
    if not 0.0 < mu < 1.0:
        raise ValueError(f"mu must lie in (0, 1), got {mu}")
    return (1.0 - mu) / 72.0


# ---------------------------------------------------------------------------
# Crossing records


@dataclass(frozen=True)
class CrossingRecord:
    """One sampled crossing of the pure-power disk, in the first quadrant.

    The trajectory enters through the disk boundary with the contracting
    coordinate dominating, crosses the diagonal exactly at the midpoint
    time, and exits with the expanding coordinate dominating.  ``axis``
    marks the degenerate probe that runs down the contracting axis: it has
    no exit, its trajectory is truncated at ``crossing_time``, and its
    midpoint time equals the crossing time (the domination never switches).

    Fields:
        params: flow parameters the record was built with.
        times: strictly increasing sample times, from 0 to crossing_time.
        s1, s2: sampled coordinates on those times.
        crossing_time: total time T inside the disk.
        midpoint_time: T/2 for true crossings, T for axis probes.
        axis: axis-probe flag.
    """

    params: SlowdownParams
    times: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    crossing_time: float
    midpoint_time: float
    axis: bool = False

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        s1 = np.asarray(self.s1, dtype=float)
        s2 = np.asarray(self.s2, dtype=float)
        if times.ndim != 1 or times.shape != s1.shape or times.shape != s2.shape:
            raise ValueError("times, s1, s2 must be equal-length 1d arrays")
        if times.size < 3:
            raise ValueError("a crossing record needs at least 3 samples")
        if times[0] != 0.0 or not np.all(np.diff(times) > 0.0):
            raise ValueError("times must increase strictly from 0")
        if abs(times[-1] - self.crossing_time) > 1e-12 * max(1.0, self.crossing_time):
            raise ValueError("last sample time must equal crossing_time")
        r1 = self.params.r1
        radii = np.hypot(s1, s2)
        if abs(radii[0] - r1) > 1e-9:
            raise ValueError("entry radius must equal the pure-zone radius")
        if np.any(radii > r1 + 1e-9):
            raise ValueError("trajectory must stay inside the pure-zone disk")
        if self.axis:
            if np.any(s1 != 0.0):
                raise ValueError("axis probes must have s1 identically zero")
            if np.any(np.diff(s2) >= 0.0):
                raise ValueError("axis probes must decay strictly")
            if self.midpoint_time != self.crossing_time:
                raise ValueError("axis probes have midpoint_time == crossing_time")
        else:
            if np.any(s1 <= 0.0) or np.any(s2 <= 0.0):
                raise ValueError("crossings must stay in the open first quadrant")
            if abs(radii[-1] - r1) > 1e-9:
                raise ValueError("exit radius must equal the pure-zone radius")
            if abs(self.midpoint_time - 0.5 * self.crossing_time) > 1e-12 * max(
                    1.0, self.crossing_time):
                raise ValueError("midpoint_time must be half the crossing time")
            early = times <= self.midpoint_time + 1e-12
            late = times >= self.midpoint_time - 1e-12
            tol = 1e-9 * r1
            if np.any(s1[early] > s2[early] + tol):
                raise ValueError("contracting coordinate must dominate before "
                                 "the midpoint")
            if np.any(s2[late] > s1[late] + tol):
                raise ValueError("expanding coordinate must dominate after "
                                 "the midpoint")
        for name, arr in (("times", times), ("s1", s1), ("s2", s2)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def midpoint_index(self) -> int:
        """Index of the sample at the midpoint time."""
        return int(np.searchsorted(self.times, self.midpoint_time))


def crossing_record(entry_angle: float, params: SlowdownParams,
                    grid_per_unit: int = 64,
                    max_time: float = 4000.0) -> CrossingRecord:
    """Build one sampled crossing from its entry angle.

    The entry point is r1*(cos a, sin a) with a strictly between pi/4 and
    pi/2, so the orbit crosses the disk and exits at the swapped point by
    the time symmetry of the flow.  The grid has ``grid_per_unit`` samples
    per unit time, symmetrized about the midpoint so that time reversal
    maps the grid to itself exactly, plus the exact entry, midpoint, and
    exit times.

    Raises:
        ValueError: angle outside (pi/4, pi/2), or crossing longer than
            max_time (too deep an entry).
    """
    if not 0.25 * math.pi < entry_angle < 0.5 * math.pi:
        raise ValueError("entry angle must lie strictly between pi/4 and pi/2")
    if grid_per_unit < 1:
        raise ValueError("grid_per_unit must be positive")
    r1 = params.r1
    s1_0 = r1 * math.cos(entry_angle)
    s2_0 = r1 * math.sin(entry_angle)
    clock = orbit_clock(s1_0, s2_0, params)
    xi0 = math.log(s1_0)
    total = 2.0 * clock.time_between(xi0, clock.xic)
    if total > max_time:
        raise ValueError(f"crossing time {total:.3g} exceeds max_time "
                         f"{max_time:.3g}; entry angle too deep")
    base = np.arange(0.0, total, 1.0 / grid_per_unit)
    times = np.unique(np.concatenate([base, total - base, [0.5 * total, total]]))
    times = times[(times >= 0.0) & (times <= total)]
    xi = clock.positions(xi0, times)
    s1 = np.exp(xi)
    s2 = (s1_0 * s2_0) / s1
    s1[0], s2[0] = s1_0, s2_0
    return CrossingRecord(params=params, times=times, s1=s1, s2=s2,
                          crossing_time=float(times[-1]),
                          midpoint_time=0.5 * total)


def axis_record(duration: float, params: SlowdownParams,
                grid_per_unit: int = 64) -> CrossingRecord:
    """Probe record running down the contracting axis from the disk edge.

    The trajectory is integrated from the implemented slowed field with a
    high-order adaptive integrator (independent of the closed forms used
    elsewhere), so comparing it against the crossing bounds checks the
    bound formulas against the field itself.
    """
    from scipy.integrate import solve_ivp

    if duration <= 0.0:
        raise ValueError("duration must be positive")
    loglam = params.log_lam

    def rhs(_t, y):
        return [-loglam * float(slow_factor(y[0] * y[0], params)) * y[0]]

    base = np.arange(0.0, duration, 1.0 / grid_per_unit)
    times = np.unique(np.concatenate([base, [duration]]))
    sol = solve_ivp(rhs, (0.0, duration), [params.r1], t_eval=times,
                    method="DOP853", rtol=1e-12, atol=1e-16)
    if not sol.success:
        raise RuntimeError(f"axis integration failed: {sol.message}")
    s2 = sol.y[0]
    s2[0] = params.r1
    return CrossingRecord(params=params, times=times, s1=np.zeros_like(s2),
                          s2=s2, crossing_time=float(times[-1]),
                          midpoint_time=float(times[-1]), axis=True)


def reversed_record(record: CrossingRecord) -> CrossingRecord:
    """The time-reversed crossing: (s1, s2, t) -> (s2, s1, T - t).

    The symmetric grid maps to itself, so the reversed record holds exactly
    the original samples in swapped roles.
    """
    if record.axis:
        raise ValueError("axis probes have no two-sided reversal")
    total = record.crossing_time
    return CrossingRecord(params=record.params,
                          times=total - record.times[::-1],
                          s1=record.s2[::-1], s2=record.s1[::-1],
                          crossing_time=total,
                          midpoint_time=total - record.midpoint_time)


def _subsample_indices(n: int, cap: int) -> np.ndarray:
    """Symmetric index subsample: if i is kept then n-1-i is kept too."""
    if n <= cap:
        return np.arange(n)
    half = np.unique(np.linspace(0, n - 1, cap // 2 + 1).astype(int))
    return np.unique(np.concatenate([half, n - 1 - half]))


# ---------------------------------------------------------------------------
# Crossing-bound verification


@dataclass(frozen=True)
class CrossingBoundsReport:
    """Worst relative margins of the four crossing bounds.

    Keys: ``contract_lower``/``contract_upper`` for the contracting
    coordinate (anchored at the earlier time), ``expand_lower``/
    ``expand_upper`` for the expanding one (anchored at the later time).
    Nonnegative margins mean the bound holds; ``passed`` allows float
    slack down to MARGIN_TOLERANCE.
    """

    margins: dict[str, float]
    worst: float
    n_points: int
    passed: bool

    def text(self) -> str:
        lines = [f"crossing bounds over {self.n_points} grid points:"]
        for key in ("contract_lower", "contract_upper",
                    "expand_lower", "expand_upper"):
            lines.append(f"  {key:>15}: worst margin {self.margins[key]:+.3e}")
        lines.append(f"  overall: {'pass' if self.passed else 'FAIL'} "
                     f"(worst {self.worst:+.3e})")
        return "\n".join(lines)


def _pairwise_margins(values: np.ndarray, times: np.ndarray, rate: float,
                      inv_two_alpha: float, sign: int) -> float:
    """Worst relative margin of value[j] against the power-law bound
    anchored at value[i], over all i <= j.

    sign +1 checks value >= bound (lower bounds), -1 checks value <= bound.
    The rate already includes the 2**alpha factor where the bound has one.
    """
    v_i = values[:, None]
    v_j = values[None, :]
    dt = times[None, :] - times[:, None]
    mask = dt >= 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = v_i * (1.0 + rate * v_i ** (1.0 / inv_two_alpha) * dt) ** (
            -inv_two_alpha)
        margin = sign * (v_j - bound) / np.where(bound > 0.0, bound, 1.0)
    both_zero = (v_i == 0.0) & (v_j == 0.0)
    margin = np.where(both_zero, 0.0, margin)
    margin = np.where(mask, margin, np.inf)
    return float(margin.min())


def verify_s1s2_bounds(record: CrossingRecord,
                       params: SlowdownParams | None = None
                       ) -> CrossingBoundsReport:
    """Check the four explicit crossing decay bounds on the record's grid.

    All admissible anchor pairs of (a symmetric subsample of) the grid are
    checked: the contracting coordinate against anchors at the earlier
    time over [0, T] (upper) and [0, T_mid] (lower), and the expanding
    coordinate in the mirrored windows.  Margins are relative; the report
    passes when the worst margin is at least MARGIN_TOLERANCE.
    """
    params = record.params if params is None else params
    c0 = crossing_constant(params)
    two_alpha = 2.0 * params.alpha
    inv = 1.0 / two_alpha
    boosted = 2.0 ** params.alpha * c0
    idx = _subsample_indices(record.times.size, _PAIRWISE_CAP)
    times = record.times[idx]
    s1 = record.s1[idx]
    s2 = record.s2[idx]
    mid = record.midpoint_time
    early = times <= mid + 1e-12
    late = times >= mid - 1e-12
    margins = {
        # |s2(t)| >= |s2(a)| (1 + 2^a C0 s2(a)^2a (t-a))^(-1/2a), t <= T_mid
        "contract_lower": _pairwise_margins(s2[early], times[early],
                                            boosted, inv, +1),
        # |s2(t)| <= |s2(a)| (1 + C0 s2(a)^2a (t-a))^(-1/2a), any t
        "contract_upper": _pairwise_margins(s2, times, c0, inv, -1),
        # mirrored bounds for s1, anchored at the later time: reverse time
        "expand_lower": _pairwise_margins(s1[late][::-1],
                                          -times[late][::-1],
                                          boosted, inv, +1),
        "expand_upper": _pairwise_margins(s1[::-1], -times[::-1],
                                          c0, inv, -1),
    }
    worst = min(margins.values())
    return CrossingBoundsReport(margins=margins, worst=worst,
                                n_points=int(times.size),
                                passed=worst >= MARGIN_TOLERANCE)


# ---------------------------------------------------------------------------
# Pair records and spread verification


@dataclass(frozen=True)
class PairRecord:
    """A crossing together with a nearby companion on the same time grid.

    The companion starts offset along (mu*u1, 1)/norm with the initial
    relative offset set to a fraction of the admissible cap.  Hypothesis
    flags are evaluated a posteriori on the sampled grid; ``admissible``
    requires all three.
    """

    base: CrossingRecord
    tilde_s1: np.ndarray
    tilde_s2: np.ndarray
    hyp_initial_ratio: bool
    hyp_sign_and_slope: bool
    hyp_companion_dominates: bool

    def __post_init__(self) -> None:
        for name in ("tilde_s1", "tilde_s2"):
            arr = np.asarray(getattr(self, name), dtype=float).copy()
            if arr.shape != self.base.times.shape:
                raise ValueError(f"{name} must match the base record's grid")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def delta_s1(self) -> np.ndarray:
        return self.tilde_s1 - self.base.s1

    @property
    def delta_s2(self) -> np.ndarray:
        return self.tilde_s2 - self.base.s2

    @property
    def admissible(self) -> bool:
        return (self.hyp_initial_ratio and self.hyp_sign_and_slope
                and self.hyp_companion_dominates)


def hypothesis_flags(base: CrossingRecord, tilde_s1: np.ndarray,
                     tilde_s2: np.ndarray, mu: float
                     ) -> tuple[bool, bool, bool]:
    """Evaluate the pair hypotheses on the grid for a given spread bound mu.

    Returns (initial-ratio cap, sign-and-slope condition, companion
    domination).  Exposed separately so admissibility can be re-evaluated
    under a different mu than the one the pair was built with.
    """
    d1 = tilde_s1 - base.s1
    d2 = tilde_s2 - base.s2
    ratio0 = abs(d2[0] / base.s2[0])
    hyp_initial = bool(ratio0 <= initial_ratio_cap(mu))
    hyp_sign = bool(np.all(d2 > 0.0) and np.all(np.abs(d1) <= mu * d2))
    hyp_dom = bool(np.all(np.abs(tilde_s2) > np.abs(base.s2)))
    return hyp_initial, hyp_sign, hyp_dom


def pair_record(base: CrossingRecord, u1: float,
                slack: float = 0.5) -> PairRecord:
    """Build the companion crossing offset along (mu*u1, 1)/norm.

    The offset magnitude is ``slack`` times the admissible initial-ratio
    cap (default 50%), applied to the contracting coordinate; u1 in
    [-1, 1] sets the expanding component of the offset direction.
    """
    if base.axis:
        raise ValueError("spread pairs need a two-sided crossing")
    if not -1.0 <= u1 <= 1.0:
        raise ValueError("u1 must lie in [-1, 1]")
    if not 0.0 < slack <= 1.0:
        raise ValueError("slack must lie in (0, 1]")
    params = base.params
    mu = params.mu
    d2_0 = slack * initial_ratio_cap(mu) * base.s2[0]
    d1_0 = mu * u1 * d2_0
    t1_0 = base.s1[0] + d1_0
    t2_0 = base.s2[0] + d2_0
    clock = orbit_clock(t1_0, t2_0, params)
    xi = clock.positions(math.log(t1_0), base.times)
    tilde_s1 = np.exp(xi)
    tilde_s2 = (t1_0 * t2_0) / tilde_s1
    tilde_s1[0], tilde_s2[0] = t1_0, t2_0
    hyp_initial, hyp_sign, hyp_dom = hypothesis_flags(
        base, tilde_s1, tilde_s2, mu)
    return PairRecord(base=base, tilde_s1=tilde_s1, tilde_s2=tilde_s2,
                      hyp_initial_ratio=hyp_initial,
                      hyp_sign_and_slope=hyp_sign,
                      hyp_companion_dominates=hyp_dom)


@dataclass(frozen=True)
class SpreadReport:
    """Per-pair spread checks.

    Explicit (margin) checks, relative margins, nonnegative = bound holds:
        deviation_margin: end-to-end deviation bound at the exit time.
        early_upper / late_upper: explicit decay envelopes of the
            contracting deviation before / after the midpoint.
        early_lower / late_lower: explicit growth floors on the same
            windows.
    Fitted quantities (stand-ins for existential constants):
        comp_upper_sup: sup of delta_s2(t) * t^gamma' / delta_s2(0) over
            grid times in [1, T_mid]  (NaN when the window is empty).
        comp_lower_inf: inf of delta_s2(t) * t^gamma / delta_s2(0) there.
        explicit_lower_floor: admissible closed-form value the compensated
            infimum must stay above.
        end_ratio: delta_s2(T) / delta_s2(T_mid).
    """

    admissible: bool
    hyp_initial_ratio: bool
    hyp_sign_and_slope: bool
    hyp_companion_dominates: bool
    deviation_margin: float
    explicit_margins: dict[str, float]
    comp_upper_sup: float
    comp_lower_inf: float
    explicit_lower_floor: float
    end_ratio: float
    passed: bool

    def text(self) -> str:
        if not self.admissible:
            return ("spread pair: inadmissible (initial ratio "
                    f"{self.hyp_initial_ratio}, sign/slope "
                    f"{self.hyp_sign_and_slope}, domination "
                    f"{self.hyp_companion_dominates})")
        lines = ["spread pair:"]
        lines.append(f"  deviation bound margin {self.deviation_margin:+.3e}")
        for key, val in self.explicit_margins.items():
            lines.append(f"  {key:>12}: worst margin {val:+.3e}")
        lines.append(f"  compensated upper sup {self.comp_upper_sup:.6g}")
        lines.append(f"  compensated lower inf {self.comp_lower_inf:.6g} "
                     f"(floor {self.explicit_lower_floor:.6g})")
        lines.append(f"  end ratio {self.end_ratio:.6g}")
        lines.append(f"  {'pass' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def verify_spread(pair: PairRecord,
                  params: SlowdownParams | None = None) -> SpreadReport:
    """Check the explicit spread bounds and compute the fitted envelopes.

    Inadmissible pairs are reported (admissible=False, NaN statistics) but
    never raise; population drivers count them.
    """
    params = pair.base.params if params is None else params
    flags = dict(hyp_initial_ratio=pair.hyp_initial_ratio,
                 hyp_sign_and_slope=pair.hyp_sign_and_slope,
                 hyp_companion_dominates=pair.hyp_companion_dominates)
    if not pair.admissible:
        nan = float("nan")
        return SpreadReport(admissible=False, **flags, deviation_margin=nan,
                            explicit_margins={}, comp_upper_sup=nan,
                            comp_lower_inf=nan, explicit_lower_floor=nan,
                            end_ratio=nan, passed=False)
    base = pair.base
    exps = decay_exponents(params.alpha, params.mu)
    c0 = crossing_constant(params)
    two_alpha = 2.0 * params.alpha
    boosted = 2.0 ** params.alpha * c0
    mu = params.mu
    times = base.times
    mid_i = base.midpoint_index
    d2 = pair.delta_s2
    d1 = pair.delta_s1
    s1, s2 = base.s1, base.s2
    t_mid = base.midpoint_time

    def rel(value: np.ndarray, bound: np.ndarray, sign: int) -> float:
        with np.errstate(divide="ignore", invalid="ignore"):
            m = sign * (value - bound) / np.where(bound > 0.0, bound, 1.0)
        return float(np.min(m)) if m.size else float("inf")

    # Explicit envelopes of the contracting deviation.
    early = slice(0, mid_i + 1)
    t_e = times[early]
    ratio0 = d2[0] / s2[0]
    decay_e = 1.0 + boosted * s2[0] ** two_alpha * t_e
    early_upper = rel(d2[early],
                      ratio0 * s2[early] * decay_e ** (-exps.beta), -1)
    decay_e1 = 1.0 + c0 * s2[0] ** two_alpha * t_e
    early_lower = rel(d2[early],
                      ratio0 * s2[early] * decay_e1 ** (-exps.beta1), +1)

    late = slice(mid_i, times.size)
    t_l = times[late]
    ratio_mid = d2[mid_i] / s1[mid_i]
    # Anchored family over exit-side anchors b >= t: subsampled pairwise.
    idx = _subsample_indices(t_l.size, _PAIRWISE_CAP // 2)
    tb = t_l[idx][None, :]
    sb = s1[late][idx][None, :]
    tt = t_l[:, None]
    grow = 1.0 + boosted * sb ** two_alpha * (tb - tt)
    anchor = 1.0 + boosted * sb ** two_alpha * (tb - t_mid)
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = ratio_mid * s1[late][:, None] * (grow / anchor) ** exps.beta
        marg = (bound - d2[late][:, None]) / np.where(bound > 0.0, bound, 1.0)
    marg = np.where(tb >= tt, marg, np.inf)
    late_upper = float(marg.min())
    grow_mid = 1.0 + c0 * s1[mid_i] ** two_alpha * (t_l - t_mid)
    late_lower = rel(d2[late],
                     ratio_mid * s1[late] * grow_mid ** (-exps.beta2), +1)

    # End-to-end deviation bound.
    dev_end = math.hypot(d1[-1], d2[-1])
    dev_0 = math.hypot(d1[0], d2[0])
    dev_bound = math.sqrt(1.0 + mu * mu) * abs(s1[-1] / s2[0]) * dev_0
    deviation_margin = (dev_bound + 1e-9 - dev_end) / dev_bound

    # Fitted compensated envelopes on [1, T_mid].
    window = (times >= 1.0) & (times <= t_mid + 1e-12)
    if np.any(window):
        tw = times[window]
        comp = d2[window] / d2[0]
        comp_upper = float(np.max(comp * tw ** exps.gamma_prime))
        comp_lower = float(np.min(comp * tw ** exps.gamma))
    else:
        comp_upper = float("nan")
        comp_lower = float("nan")
    floor = (1.0 + boosted * s2[0] ** two_alpha) ** (-exps.gamma)
    end_ratio = float(d2[-1] / d2[mid_i])

    margins = {"early_upper": early_upper, "early_lower": early_lower,
               "late_upper": late_upper, "late_lower": late_lower}
    worst = min(min(margins.values()), deviation_margin)
    floor_ok = (math.isnan(comp_lower)
                or comp_lower >= floor * (1.0 + MARGIN_TOLERANCE))
    return SpreadReport(admissible=True, **flags,
                        deviation_margin=deviation_margin,
                        explicit_margins=margins,
                        comp_upper_sup=comp_upper,
                        comp_lower_inf=comp_lower,
                        explicit_lower_floor=floor,
                        end_ratio=end_ratio,
                        passed=worst >= MARGIN_TOLERANCE and floor_ok
                        and end_ratio > 0.0)


# ---------------------------------------------------------------------------
# Population drivers


def sample_entry_angles(n: int, seed: int,
                        depth_range: tuple[float, float] = (3e-4, 0.5)
                        ) -> np.ndarray:
    """Deterministic entry angles with log-uniform entry depth.

    Depth is the entering expanding coordinate as a fraction of the disk
    radius; smaller depth means a longer crossing.
    """
    lo, hi = depth_range
    if not 0.0 < lo < hi < math.sqrt(0.5):
        raise ValueError("depth_range must satisfy 0 < lo < hi < sqrt(1/2)")
    rng = np.random.default_rng(seed)
    frac = np.exp(rng.uniform(math.log(lo), math.log(hi), size=n))
    return np.arccos(frac)


@dataclass(frozen=True)
class CrossingPopulationReport:
    """Aggregated crossing-bound margins over a sampled population."""

    n_records: int
    margins: dict[str, float]
    worst: float
    max_crossing_time: float
    passed: bool

    def text(self) -> str:
        lines = [f"crossing bounds over {self.n_records} crossings "
                 f"(longest T = {self.max_crossing_time:.1f}):"]
        for key, val in self.margins.items():
            lines.append(f"  {key:>15}: worst margin {val:+.3e}")
        lines.append(f"  overall: {'pass' if self.passed else 'FAIL'} "
                     f"(worst {self.worst:+.3e})")
        return "\n".join(lines)


def crossing_population(n_records: int, params: SlowdownParams,
                        seed: int = 0) -> CrossingPopulationReport:
    """Run the crossing-bound suite over a population of random crossings."""
    if n_records < 1:
        raise ValueError("n_records must be positive")
    angles = sample_entry_angles(n_records, seed)
    keys = ("contract_lower", "contract_upper", "expand_lower", "expand_upper")
    margins = {key: math.inf for key in keys}
    t_max = 0.0
    for angle in angles:
        record = crossing_record(float(angle), params)
        report = verify_s1s2_bounds(record)
        for key in keys:
            margins[key] = min(margins[key], report.margins[key])
        t_max = max(t_max, record.crossing_time)
    worst = min(margins.values())
    return CrossingPopulationReport(n_records=n_records, margins=margins,
                                    worst=worst, max_crossing_time=t_max,
                                    passed=worst >= MARGIN_TOLERANCE)


@dataclass(frozen=True)
class SpreadPopulationReport:
    """Fitted spread constants over a pair population.

    c_upper / c_lower are the population envelopes of the compensated
    deviation (upper sup with the faster exponent, lower inf with the
    slower one); c_end_high / c_end_low bound the exit-to-midpoint
    deviation ratio.  ``floor`` is the largest closed-form admissible
    lower constant over the population; c_lower must not drop below it.
    """

    n_pairs: int
    n_admissible: int
    n_skipped: int
    c_upper: float
    c_lower: float
    c_end_high: float
    c_end_low: float
    floor: float
    worst_margin: float
    passed: bool

    def text(self) -> str:
        return "\n".join([
            f"spread pairs: {self.n_admissible}/{self.n_pairs} admissible "
            f"({self.n_skipped} skipped)",
            f"  fitted upper envelope  {self.c_upper:.6g}",
            f"  fitted lower envelope  {self.c_lower:.6g} "
            f"(closed-form floor {self.floor:.6g})",
            f"  end-ratio range        [{self.c_end_low:.6g}, "
            f"{self.c_end_high:.6g}]",
            f"  worst explicit margin  {self.worst_margin:+.3e}",
            f"  {'pass' if self.passed else 'FAIL'}",
        ])


def spread_population(n_pairs: int, params: SlowdownParams, seed: int = 0,
                      depth_range: tuple[float, float] = (3e-4, 0.45)
                      ) -> SpreadPopulationReport:
    """Run the pair-spread suite over a population of random pairs.

    Pairs are built on random crossings with the offset direction's
    expanding component uniform in [-1, 1]; inadmissible pairs (hypotheses
    failing a posteriori) are skipped and counted.  The windowed envelopes
    require the midpoint to lie past t = 1, so very shallow crossings
    contribute margins but not envelope values.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    angles = sample_entry_angles(n_pairs, seed, depth_range)
    rng = np.random.default_rng(seed + 1)
    u1s = rng.uniform(-1.0, 1.0, size=n_pairs)
    c_upper, c_lower = -math.inf, math.inf
    c_end_high, c_end_low = -math.inf, math.inf
    floor = -math.inf
    worst = math.inf
    n_adm = 0
    for angle, u1 in zip(angles, u1s):
        base = crossing_record(float(angle), params)
        report = verify_spread(pair_record(base, float(u1)))
        if not report.admissible:
            continue
        n_adm += 1
        worst = min(worst, report.deviation_margin,
                    min(report.explicit_margins.values()))
        if not math.isnan(report.comp_upper_sup):
            c_upper = max(c_upper, report.comp_upper_sup)
            c_lower = min(c_lower, report.comp_lower_inf)
            floor = max(floor, report.explicit_lower_floor)
        c_end_high = max(c_end_high, report.end_ratio)
        c_end_low = min(c_end_low, report.end_ratio)
    ok = (n_adm > 0 and worst >= MARGIN_TOLERANCE
          and 0.0 < c_lower <= c_upper < math.inf
          and 0.0 < c_end_low <= c_end_high < math.inf
          and c_lower >= floor * (1.0 + MARGIN_TOLERANCE))
    return SpreadPopulationReport(n_pairs=n_pairs, n_admissible=n_adm,
                                  n_skipped=n_pairs - n_adm,
                                  c_upper=c_upper, c_lower=c_lower,
                                  c_end_high=c_end_high, c_end_low=c_end_low,
                                  floor=floor, worst_margin=worst, passed=ok)


# ---------------------------------------------------------------------------
# Stable-curve length sandwich on the surface


@dataclass(frozen=True)
class LengthRatioReport:
    """Entry-to-exit contraction of stable polylines through a singular disk.

    For each included segment the chart-entry step n, exit step m, and the
    flat-metric length ratio L(m)/L(n) are recorded.  The compensated
    envelopes multiply the ratio by (m-n)^gamma (lower, must stay away
    from 0) and (m-n)^gamma' (upper, must stay finite).  The log-log fit
    of ratio against m-n separates polynomial from exponential
    contraction: ``envelopes_violated`` is the control discriminator.
    """

    n_segments: int
    n_included: int
    n_no_entry: int
    n_no_exit: int
    deltas: np.ndarray
    ratios: np.ndarray
    c_lower: float
    c_upper: float
    slope: float
    curvature_t: float
    envelopes_violated: bool
    passed: bool

    def text(self) -> str:
        dmin = int(self.deltas.min()) if self.deltas.size else 0
        dmax = int(self.deltas.max()) if self.deltas.size else 0
        return "\n".join([
            f"length ratio: {self.n_included}/{self.n_segments} segments "
            f"({self.n_no_entry} never entered, {self.n_no_exit} never "
            f"exited), sojourns {dmin}..{dmax}",
            f"  compensated lower envelope {self.c_lower:.6g}",
            f"  compensated upper envelope {self.c_upper:.6g}",
            f"  log-log slope {self.slope:.3f} "
            f"(curvature t-stat {self.curvature_t:+.2f})",
            f"  polynomial envelopes "
            f"{'VIOLATED' if self.envelopes_violated else 'consistent'}",
            f"  {'pass' if self.passed else 'FAIL'}",
        ])


def _stable_segments(n_segments: int, model: ReferenceModel, seed: int,
                     n_vertices: int, seg_length: float
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Seeded stable polylines aimed at the singular disks.

    Returns vertex coordinates (n_segments, n_vertices, 2) and sheets.
    Segments start on a ring outside the singular disk with a log-uniform
    unstable offset that sets how deep the orbit will pass.
    """
    rng = np.random.default_rng(seed)
    d = model._derived
    basis = d["basis"]
    rho1sq = model.params.rho1 ** 2
    start_s = rho1sq * 3.0
    xy = np.empty((n_segments, n_vertices, 2))
    sheets = np.empty(n_segments, dtype=np.int64)
    offsets = (np.linspace(-0.5, 0.5, n_vertices) * seg_length)
    for i in range(n_segments):
        depth = math.exp(rng.uniform(math.log(1e-7), math.log(5e-4)))
        stable = start_s * (1.0 + 0.25 * rng.random())
        signs = rng.choice((-1.0, 1.0), size=2)
        k = int(rng.integers(0, 2))
        center = (model.branch_xy[k]
                  + basis @ np.array([signs[0] * depth, signs[1] * stable]))
        verts = center[None, :] + offsets[:, None] * basis[:, 1][None, :]
        verts %= 1.0
        sheet0 = int(rng.integers(0, 2))
        flips = transport_parity(np.tile(verts[0], (n_vertices, 1)),
                                 verts, model)
        xy[i] = verts
        sheets[i] = sheet0
        # vertex sheets differ from the first vertex by the transported
        # parity; store per-segment base sheet and apply flips at use time
        if i == 0:
            flip_store = np.empty((n_segments, n_vertices), dtype=np.int64)
        flip_store[i] = flips
    vertex_sheets = (sheets[:, None] ^ flip_store) & 1
    return xy, vertex_sheets


def _polyline_lengths(xy: np.ndarray, basis_inv: np.ndarray) -> np.ndarray:
    """Flat-metric lengths of wrapped polylines, batched (n_seg, n_vert, 2)."""
    diffs = xy[:, 1:, :] - xy[:, :-1, :]
    diffs -= np.round(diffs)
    eig = diffs @ basis_inv.T
    return np.hypot(eig[..., 0], eig[..., 1]).sum(axis=1)


def verify_length_ratio(n_segments: int, params: SlowdownParams,
                        model: ReferenceModel, seed: int = 0,
                        step_cap: int = 200, n_vertices: int = 33,
                        seg_length: float = 1e-4) -> LengthRatioReport:
    """Drive stable polylines through a singular disk and check the
    polynomial contraction sandwich between entry and exit.

    Entry is the first step whose midpoint vertex lies inside the singular
    disk (squared-radius rho1**2 in the eigenframe); exit is the first
    later step outside.  Lengths are measured in the flat eigenframe
    metric.  Segments that never enter or never exit within step_cap are
    excluded and counted.  With the slow-down disabled the ratios are
    exactly lam**-(m-n) and the polynomial envelopes must come out
    violated.

    Raises:
        ValueError: fewer than 100 segments requested, or parameter
            records disagreeing on the decay exponents.
    """
    if n_segments < 100:
        raise ValueError("the sandwich needs at least 100 segments")
    if (params.alpha, params.mu) != (model.params.alpha, model.params.mu):
        raise ValueError("params and model disagree on alpha/mu")
    exps = decay_exponents(params.alpha, params.mu)
    d = model._derived
    rho1sq = model.params.rho1 ** 2
    mid = n_vertices // 2
    xy, sheets = _stable_segments(n_segments, model, seed, n_vertices,
                                  seg_length)
    state = np.zeros(n_segments, dtype=np.int64)  # 0 outside, 1 inside, 2 done
    entry_step = np.full(n_segments, -1, dtype=np.int64)
    exit_step = np.full(n_segments, -1, dtype=np.int64)
    entry_len = np.zeros(n_segments)
    exit_len = np.zeros(n_segments)
    flat = xy.reshape(-1, 2)
    flat_sheets = sheets.reshape(-1)
    active = np.ones(n_segments, dtype=bool)
    for step in range(1, step_cap + 1):
        idx = np.repeat(active, n_vertices)
        out_xy, out_sh = global_map_batch(flat[idx], flat_sheets[idx], model)
        flat[idx] = out_xy
        flat_sheets[idx] = out_sh
        cur = flat.reshape(n_segments, n_vertices, 2)
        mids = cur[active, mid, :]
        _, zeta = nearest_chart(mids, model)
        inside = np.abs(zeta) <= rho1sq
        act_ids = np.flatnonzero(active)
        entering = act_ids[inside & (state[act_ids] == 0)]
        if entering.size:
            state[entering] = 1
            entry_step[entering] = step
            entry_len[entering] = _polyline_lengths(cur[entering],
                                                    d["basis_inv"])
        leaving = act_ids[

            ~inside & (state[act_ids] == 1)]
        if leaving.size:
            state[leaving] = 2
            exit_step[leaving] = step
            exit_len[leaving] = _polyline_lengths(cur[leaving],
                                                  d["basis_inv"])
            active[leaving] = False
        if not active.any():
            break
    done = state == 2
    n_no_entry = int((state == 0).sum())
    n_no_exit = int((state == 1).sum())
    deltas = (exit_step[done] - entry_step[done]).astype(float)
    ratios = exit_len[done] / entry_len[done]
    if done.sum() >= 3 and np.unique(deltas).size >= 3:
        comp_low = ratios * deltas ** exps.gamma
        comp_high = ratios * deltas ** exps.gamma_prime
        c_lower = float(comp_low.min())
        c_upper = float(comp_high.max())
        slope, curvature_t = _loglog_fit(deltas, ratios)
        violated = not (
            -exps.gamma - 0.7 <= slope <= -exps.gamma_prime + 0.7
            and abs(curvature_t) < 4.0)
        ok = (0.0 < c_lower and c_upper < math.inf and not violated)
    else:
        c_lower, c_upper = float("nan"), float("nan")
        slope, curvature_t = float("nan"), float("nan")
        violated = True
        ok = False
    return LengthRatioReport(n_segments=n_segments, n_included=int(done.sum()),
                             n_no_entry=n_no_entry, n_no_exit=n_no_exit,
                             deltas=deltas, ratios=ratios, c_lower=c_lower,
                             c_upper=c_upper, slope=slope,
                             curvature_t=curvature_t,
                             envelopes_violated=violated, passed=ok)


def _loglog_fit(deltas: np.ndarray, ratios: np.ndarray) -> tuple[float, float]:
    """Slope and quadratic-curvature t-statistic of log ratio vs log delta.

    Bins repeated sojourn lengths by their median ratio first, so long
    sojourns are not swamped by the (far more numerous) short ones.
    """
    keep = deltas >= 2.0
    x = np.log(deltas[keep])
    y = np.log(ratios[keep])
    xs = np.unique(x)
    ys = np.array([np.median(y[x == v]) for v in xs])
    slope = float(np.polyfit(xs, ys, 1)[0])
    if xs.size >= 4:
        coeffs, residuals, *_ = np.polyfit(xs, ys, 2, full=True)
        dof = xs.size - 3
        if dof > 0 and residuals.size:
            sigma2 = float(residuals[0]) / dof
            xc = xs - xs.mean()
            design = np.column_stack([xc * xc, xc, np.ones_like(xs)])
            cov = np.linalg.inv(design.T @ design)
            se = math.sqrt(max(sigma2 * cov[0, 0], 1e-300))
            curvature_t = float(coeffs[0] / se)
        else:
            curvature_t = 0.0
    else:
        curvature_t = 0.0
    return slope, curvature_t
