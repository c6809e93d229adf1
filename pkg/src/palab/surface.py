"""Branched double cover of the torus carrying the corrected hyperbolic map.

The reference surface is a genus-two double cover of the flat torus,
branched over a period-two orbit of the linear toral automorphism.  Points
are stored as torus coordinates plus a sheet bit; the sheet structure is
realized by a straight cut between the branch points, and sheet transport
counts cut crossings.  Near each branch point a square-root chart turns the
cone of angle 4*pi into an honest disk, and the slow-down correction from
:mod:`palab.charts` acts there; everywhere else one step of the dynamics is
the plain linear automorphism.

Distances, differentials, and chart radii all refer to the flat expanding/
contracting eigenframe of the automorphism (unit eigenvectors), in which the
linear step is exactly ``diag(lam, 1/lam)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .charts import (
    invariant_density,
    local_correction,
    sector_map,
    sector_map_inv,
    sector_of,
)
from .slowdown import ConvergenceError, SlowdownParams, surface_params

__all__ = [
    "SurfacePoint",
    "ReferenceModel",
    "reference_model",
    "cover_step",
    "cover_step_batch",
    "chart_coordinate",
    "chart_point",
    "nearest_chart",
    "transport_parity",
    "global_map",
    "global_map_batch",
    "differential",
    "surface_density",
    "sample_area",
    "sample_area_arrays",
    "lyapunov_exponent",
    "model_to_text",
    "model_from_text",
]

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

# Probe offset used when an orbit lands numerically on a branch point and a
# statistic has to be restarted from a nudged initial condition.
_RESTART_NUDGE = 1e-7


@dataclass(frozen=True)
class SurfacePoint:
    """A point of the double cover: torus coordinates plus a sheet bit.

    Coordinates are wrapped into [0, 1) on construction.  The sheet bit has
    no intrinsic meaning at the branch points themselves (the two sheets are
    glued there), so functions returning branch points canonicalize the bit
    to 0.
    """

    x: float
    y: float
    sheet: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", float(self.x) % 1.0)
        object.__setattr__(self, "y", float(self.y) % 1.0)
        if self.sheet not in (0, 1):
            raise ValueError(f"sheet must be 0 or 1, got {self.sheet!r}")


def _unit_eigen_basis(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Columns: unit expanding and contracting eigenvectors; returns B, B^-1, lam."""
    eigvals, eigvecs = np.linalg.eig(mat.astype(float))
    order = np.argsort(eigvals)[::-1]
    lam = float(eigvals[order[0]])
    vu = eigvecs[:, order[0]]
    vs = eigvecs[:, order[1]]
    # Fix signs so the basis depends only on the matrix, not on LAPACK.
    if vu[0] < 0:
        vu = -vu
    if vs[1] < 0:
        vs = -vs
    basis = np.column_stack([vu / np.linalg.norm(vu), vs / np.linalg.norm(vs)])
    return basis, np.linalg.inv(basis), lam


def _orient(px, py, qx, qy, rx, ry):
    """Twice the signed area of the triangle (p, q, r); vectorized."""
    return (qx - px) * (ry - py) - (qy - py) * (rx - px)


@dataclass(frozen=True)
class ReferenceModel:
    """Immutable bundle of everything defining the reference surface system.

    Attributes:
        matrix: the hyperbolic toral automorphism, entries as a 2x2 int tuple.
        branch_points: two torus points, given as exact rationals, forming a
            period-two orbit of the matrix.
        cut_offset: integer translate applied to the second branch point when
            drawing the straight cut from the first; the cut realizes the
            sheet structure and must make the cover compatible with the
            matrix action (checked at construction).
        base_point: generic torus point anchoring the crossing-parity rule.
        params: slow-down construction constants for the singular charts.
        default_seed: seed recorded with the model for serialization.
    """

    matrix: tuple[tuple[int, int], tuple[int, int]] = ((3, 2), (1, 1))
    branch_points: tuple[tuple[Fraction, Fraction], tuple[Fraction, Fraction]] = (
        (Fraction(1, 3), Fraction(1, 3)),
        (Fraction(2, 3), Fraction(2, 3)),
    )
    cut_offset: tuple[int, int] = (-1, 0)
    base_point: tuple[float, float] = (0.11, 0.83)
    params: SlowdownParams = field(default_factory=surface_params)
    default_seed: int = 0

    # Derived geometry, filled in at construction; excluded from equality.
    _derived: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        mat = np.array(self.matrix, dtype=float)
        mat_int = np.array(self.matrix, dtype=int)
        det = int(round(np.linalg.det(mat_int)))
        if det != 1:
            raise ValueError(f"matrix must have determinant 1, got {det}")
        if abs(np.trace(mat_int)) <= 2:
            raise ValueError("matrix must be hyperbolic (|trace| > 2)")
        mat_inv = np.array([[mat_int[1, 1], -mat_int[0, 1]],
                            [-mat_int[1, 0], mat_int[0, 0]]], dtype=float)
        basis, basis_inv, lam = _unit_eigen_basis(mat)
        d = self._derived
        d["mat"] = mat
        d["mat_inv"] = mat_inv
        d["basis"] = basis
        d["basis_inv"] = basis_inv
        d["lam"] = lam

        if len(self.branch_points) != 2:
            raise ValueError("exactly two branch points are required")
        bf = [tuple(Fraction(c) for c in bp) for bp in self.branch_points]
        # The matrix must permute the branch points mod 1 (here: swap them).
        images = []
        for bx, by in bf:
            ix = (self.matrix[0][0] * bx + self.matrix[0][1] * by) % 1
            iy = (self.matrix[1][0] * bx + self.matrix[1][1] * by) % 1
            images.append((ix, iy))
        if images[0] == bf[1] and images[1] == bf[0]:
            d["branch_perm"] = (1, 0)
        elif images[0] == bf[0] and images[1] == bf[1]:
            d["branch_perm"] = (0, 1)
        else:
            raise ValueError("branch points must form an orbit of the matrix")
        d["branch_xy"] = np.array([[float(b[0]), float(b[1])] for b in bf])

        # The cut: a straight segment from the first branch point to the
        # chosen integer translate of the second.
        cut_a = d["branch_xy"][0]
        cut_b = np.array([float(bf[1][0] + self.cut_offset[0]),
                          float(bf[1][1] + self.cut_offset[1])])
        d["cut_a"] = cut_a
        d["cut_b"] = cut_b
        zd = basis_inv @ (cut_b - cut_a)
        theta = math.atan2(zd[1], zd[0])
        # Chart cut angles: direction in which the cut leaves each branch
        # point, measured in the eigenframe.  At the far end the germ points
        # the opposite way.
        theta2 = theta - math.pi if theta > 0 else theta + math.pi
        d["cut_angle"] = (theta, theta2)
        d["cut_eigen_length"] = float(np.hypot(*zd))

        # Chart activation radii in the sector coordinate (half the eigen
        # displacement for p = 4): the correction is exactly the identity
        # above lam * push_hi = 0.78 * r0, so triggering at 0.8 * r0 forward
        # is exact; the image of the active disk stays inside 0.8 * r0, so
        # triggering at 0.9 * r0 after the inverse linear step captures every
        # corrected point, again exactly.
        prm = self.params
        d["s_active_fwd"] = 0.8 * prm.r0
        d["s_active_bwd"] = 0.9 * prm.r0
        half_p = prm.p / 2.0
        d["zeta_active_fwd"] = (half_p * d["s_active_fwd"]) ** (2.0 / half_p)
        d["zeta_active_bwd"] = (half_p * d["s_active_bwd"]) ** (2.0 / half_p)
        d["chart_radius"] = prm.a_star ** 2

        # Separation sanity: charts must not overlap each other or foreign
        # pieces of the cut.
        sep = _min_eigen_separation(d["branch_xy"], basis_inv)
        d["branch_separation"] = sep
        if sep <= 2.0 * d["chart_radius"]:
            raise ValueError("singular charts overlap: branch points too close")
        if d["cut_eigen_length"] <= d["chart_radius"]:
            raise ValueError("cut shorter than the chart radius")

        # Precomputed cut-translate lists for segment bundles [p0, x] with x
        # in the unit square and p0 one of the parity anchors.
        base = np.array(self.base_point)
        d["anchor_id"] = base
        d["anchor_fwd"] = mat @ base
        d["anchor_bwd"] = mat_inv @ base
        d["translates"] = {}
        for key, anchor, corner in (
            ("id", base, np.array([[0.0, 0.0], [1.0, 1.0]])),
            ("fwd", mat @ base, _image_bbox(mat)),
            ("bwd", mat_inv @ base, _image_bbox(mat_inv)),
        ):
            lo = np.minimum(anchor, corner[0]) - 1e-6
            hi = np.maximum(anchor, corner[1]) + 1e-6
            d["translates"][key] = _cut_translates(cut_a, cut_b, lo, hi)

        # The two-point crossing rule defines a genuine lift of the matrix
        # only when the parity character of every loop is preserved by the
        # action; the two generators suffice.
        for mat_dir, key in ((mat, "fwd"), (mat_inv, "bwd")):
            for gen in (np.array([1.0, 0.0]), np.array([0.0, 1.0])):
                c1 = _count_crossings(base[None, :], (base + gen)[None, :],
                                      d["translates"]["id"])
                big = _cut_translates(cut_a, cut_b,
                                      np.minimum(mat_dir @ base,
                                                 mat_dir @ (base + gen)) - 1e-6,
                                      np.maximum(mat_dir @ base,
                                                 mat_dir @ (base + gen)) + 1e-6)
                c2 = _count_crossings((mat_dir @ base)[None, :],
                                      (mat_dir @ (base + gen))[None, :], big)
                if (int(c1[0]) + int(c2[0])) % 2 != 0:
                    raise ValueError(
                        "cut choice does not lift the matrix to the cover "
                        f"(generator {gen} has odd parity defect, {key})")

    # Convenience accessors -------------------------------------------------

    @property
    def mat(self) -> np.ndarray:
        return self._derived["mat"]

    @property
    def mat_inv(self) -> np.ndarray:
        return self._derived["mat_inv"]

    @property
    def basis(self) -> np.ndarray:
        return self._derived["basis"]

    @property
    def basis_inv(self) -> np.ndarray:
        return self._derived["basis_inv"]

    @property
    def lam(self) -> float:
        return self._derived["lam"]

    @property
    def log_lam(self) -> float:
        return math.log(self._derived["lam"])

    @property
    def branch_xy(self) -> np.ndarray:
        return self._derived["branch_xy"]

    @property
    def branch_perm(self) -> tuple[int, int]:
        return self._derived["branch_perm"]

    @property
    def cut_angle(self) -> tuple[float, float]:
        return self._derived["cut_angle"]

    @property
    def zeta_active_fwd(self) -> float:
        return self._derived["zeta_active_fwd"]

    @property
    def zeta_active_bwd(self) -> float:
        return self._derived["zeta_active_bwd"]

    @property
    def chart_radius(self) -> float:
        return self._derived["chart_radius"]

    def control(self) -> "ReferenceModel":
        """The same cover with the slow-down disabled (plain linear steps)."""
        return replace(self, params=self.params.control(), _derived={})


def _image_bbox(mat: np.ndarray) -> np.ndarray:
    """Axis-aligned bounding box of mat applied to the unit square."""
    corners = mat @ np.array([[0.0, 1.0, 0.0, 1.0], [0.0, 0.0, 1.0, 1.0]])
    return np.array([corners.min(axis=1), corners.max(axis=1)])


def _min_eigen_separation(branch_xy: np.ndarray, basis_inv: np.ndarray) -> float:
    best = math.inf
    for dx in (-1.0, 0.0, 1.0):
        for dy in (-1.0, 0.0, 1.0):
            dvec = branch_xy[1] - branch_xy[0] + np.array([dx, dy])
            best = min(best, float(np.hypot(*(basis_inv @ dvec))))
    return best


def _cut_translates(cut_a: np.ndarray, cut_b: np.ndarray,
                    lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All integer translates of the cut whose bbox meets [lo, hi]."""
    clo = np.minimum(cut_a, cut_b)
    chi = np.maximum(cut_a, cut_b)
    ms = range(int(math.floor(lo[0] - chi[0])), int(math.ceil(hi[0] - clo[0])) + 1)
    ns = range(int(math.floor(lo[1] - chi[1])), int(math.ceil(hi[1] - clo[1])) + 1)
    offs = np.array([[m, n] for m in ms for n in ns], dtype=float)
    if len(offs) == 0:
        offs = np.zeros((0, 2))
    return cut_a + offs, cut_b + offs


def _count_crossings(p0: np.ndarray, p1: np.ndarray,
                     translates: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """Count proper crossings of segments [p0_i, p1_i] with the cut translates.

    A crossing is counted only when both segments strictly straddle each
    other's line, so touching an endpoint never counts; this realizes the
    half-open convention for the cut.  Shapes: p0, p1 are (n, 2); the result
    is an (n,) int array.  Work is chunked so the (n, k) intermediate stays
    modest.
    """
    c1, c2 = translates
    n = p0.shape[0]
    k = c1.shape[0]
    if k == 0:
        return np.zeros(n, dtype=np.int64)
    out = np.empty(n, dtype=np.int64)
    chunk = max(1, (1 << 21) // max(k, 1))
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        px, py = p0[sl, 0:1], p0[sl, 1:2]
        qx, qy = p1[sl, 0:1], p1[sl, 1:2]
        ax, ay = c1[:, 0][None, :], c1[:, 1][None, :]
        bx, by = c2[:, 0][None, :], c2[:, 1][None, :]
        o1 = _orient(px, py, qx, qy, ax, ay)
        o2 = _orient(px, py, qx, qy, bx, by)
        o3 = _orient(ax, ay, bx, by, px, py)
        o4 = _orient(ax, ay, bx, by, qx, qy)
        cross = (o1 * o2 < 0.0) & (o3 * o4 < 0.0)
        out[sl] = cross.sum(axis=1)
    return out


def transport_parity(p0, p1, model: ReferenceModel) -> np.ndarray:
    """Sheet-transport parity along straight segments in the lifted plane.

    Arguments are (n, 2) arrays (or single 2-vectors) of plane points --
    lifts, not reduced torus points.  Returns 0/1 per segment: 1 when
    carrying a cover point along the segment switches sheets.
    """
    p0 = np.atleast_2d(np.asarray(p0, dtype=float))
    p1 = np.atleast_2d(np.asarray(p1, dtype=float))
    lo = np.minimum(p0.min(axis=0), p1.min(axis=0)) - 1e-6
    hi = np.maximum(p0.max(axis=0), p1.max(axis=0)) + 1e-6
    trans = _cut_translates(model._derived["cut_a"], model._derived["cut_b"], lo, hi)
    return (_count_crossings(p0, p1, trans) % 2).astype(np.int64)


def _step_parity(xy: np.ndarray, model: ReferenceModel, inverse: bool) -> np.ndarray:
    """Sheet flip of one linear step at each canonical-lift point xy."""
    d = model._derived
    mat = d["mat_inv"] if inverse else d["mat"]
    anchor = d["anchor_bwd"] if inverse else d["anchor_fwd"]
    key = "bwd" if inverse else "fwd"
    base = d["anchor_id"]
    c_near = _count_crossings(np.broadcast_to(base, xy.shape), xy,
                              d["translates"]["id"])
    img = xy @ mat.T
    c_far = _count_crossings(np.broadcast_to(anchor, img.shape), img,
                             d["translates"][key])
    return ((c_near + c_far) % 2).astype(np.int64)


# ---------------------------------------------------------------------------
# One linear step of the cover


def cover_step_batch(xy: np.ndarray, sheet: np.ndarray, model: ReferenceModel,
                     inverse: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Apply the lifted linear automorphism to arrays of cover points.

    ``xy`` is (n, 2) with entries in [0, 1); ``sheet`` is (n,) of 0/1.
    Returns the image coordinate array and sheet array.  Points lying
    exactly on a branch point are sent to the exact partner branch point
    with the sheet canonicalized to 0.
    """
    xy = np.asarray(xy, dtype=float)
    sheet = np.asarray(sheet, dtype=np.int64)
    d = model._derived
    mat = d["mat_inv"] if inverse else d["mat"]
    out = (xy @ mat.T) % 1.0
    flips = _step_parity(xy, model, inverse)
    new_sheet = sheet ^ flips
    bxy = d["branch_xy"]
    perm = d["branch_perm"]
    for k in range(2):
        hit = (xy[:, 0] == bxy[k, 0]) & (xy[:, 1] == bxy[k, 1])
        if np.any(hit):
            target = perm[k] if not inverse else perm.index(k)
            out[hit] = bxy[target]
            new_sheet[hit] = 0
    return out, new_sheet


def cover_step(pt: SurfacePoint, model: ReferenceModel,
               inverse: bool = False) -> SurfacePoint:
    """One linear step of the cover dynamics at a single point."""
    xy, sheet = cover_step_batch(np.array([[pt.x, pt.y]]),
                                 np.array([pt.sheet]), model, inverse)
    return SurfacePoint(xy[0, 0], xy[0, 1], int(sheet[0]))


# ---------------------------------------------------------------------------
# Singular charts


def nearest_chart(xy: np.ndarray, model: ReferenceModel
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearer branch point and the eigenframe displacement.

    Returns (k, zeta): ``k`` is (n,) in {0, 1}; ``zeta`` is (n,) complex,
    the displacement from branch point k in the eigenframe (real part along
    the expanding direction).
    """
    xy = np.asarray(xy, dtype=float)
    d = model._derived
    binv = d["basis_inv"]
    zetas = []
    for k in range(2):
        disp = xy - d["branch_xy"][k]
        disp -= np.round(disp)
        e = disp @ binv.T
        zetas.append(e[:, 0] + 1j * e[:, 1])
    z0, z1 = zetas
    k = (np.abs(z1) < np.abs(z0)).astype(np.int64)
    return k, np.where(k == 1, z1, z0)


def _to_chart_arrays(sheet: np.ndarray, k: np.ndarray,
                     zeta: np.ndarray, model: ReferenceModel) -> np.ndarray:
    """Square-root chart coordinate w for points near branch points.

    The chart's half-angle branch discontinuity is aligned with the actual
    cut germ, so that (torus point, transported sheet) |-> w is continuous
    across the cut; the two sheets differ by the deck involution w -> -w.
    """
    tc = np.asarray(model._derived["cut_angle"])[k]
    th = np.angle(zeta)
    tht = np.where(th <= tc, th, th - TWO_PI)
    w0 = np.sqrt(np.abs(zeta)) * np.exp(0.5j * tht)
    return np.where(sheet == 1, -w0, w0)


def _from_chart_arrays(w: np.ndarray, k: np.ndarray, model: ReferenceModel
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Invert the square-root chart: w -> (torus coordinates, sheet)."""
    d = model._derived
    zeta = w * w
    disp = np.column_stack([zeta.real, zeta.imag]) @ d["basis"].T
    xy = (d["branch_xy"][k] + disp) % 1.0
    tc = np.asarray(d["cut_angle"])[k]
    t2 = 2.0 * np.angle(w)
    m = np.ceil((t2 - tc) / TWO_PI).astype(np.int64)
    sheet = m % 2
    zero = w == 0.0
    if np.any(zero):
        xy[zero] = d["branch_xy"][k[zero]]
        sheet = np.where(zero, 0, sheet)
    return xy, sheet


def chart_coordinate(pt: SurfacePoint, k: int, model: ReferenceModel) -> complex:
    """Square-root chart coordinate of a single point near branch point k."""
    disp = np.array([[pt.x, pt.y]]) - model.branch_xy[k]
    disp -= np.round(disp)
    e = disp @ model.basis_inv.T
    zeta = e[:, 0] + 1j * e[:, 1]
    w = _to_chart_arrays(np.array([pt.sheet]), np.array([k]), zeta, model)
    return complex(w[0])


def chart_point(w: complex, k: int, model: ReferenceModel) -> SurfacePoint:
    """Cover point with chart coordinate w at branch point k."""
    xy, sheet = _from_chart_arrays(np.array([w], dtype=complex),
                                   np.array([k]), model)
    return SurfacePoint(xy[0, 0], xy[0, 1], int(sheet[0]))


# ---------------------------------------------------------------------------
# The corrected global map


def _apply_correction(xy: np.ndarray, sheet: np.ndarray, active: np.ndarray,
                      k: np.ndarray, zeta: np.ndarray, model: ReferenceModel,
                      inverse: bool) -> None:
    """In-place slow-down correction on the active points, in their charts."""
    if not np.any(active):
        return
    prm = model.params
    ka = k[active]
    w = _to_chart_arrays(sheet[active], ka, zeta[active], model)
    j = sector_of(w, prm)
    s = sector_map(w, j, prm)
    s2 = local_correction(s, prm, inverse=inverse)
    w2 = sector_map_inv(s2, j, prm)
    xy[active], sheet[active] = _from_chart_arrays(w2, ka, model)


def global_map_batch(xy: np.ndarray, sheet: np.ndarray, model: ReferenceModel,
                     inverse: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """One step of the corrected cover dynamics on arrays of points.

    Forward composes the chart correction with the linear step; backward
    composes the inverse linear step with the inverse correction.  The
    correction is skipped exactly where it is the identity, so away from the
    branch points the step is the plain lifted automorphism, bit for bit.
    """
    xy = np.array(np.atleast_2d(np.asarray(xy, dtype=float)), copy=True)
    sheet = np.array(np.atleast_1d(np.asarray(sheet)), dtype=np.int64, copy=True)
    d = model._derived
    if not inverse:
        if not model.params.disabled:
            k, zeta = nearest_chart(xy, model)
            active = np.abs(zeta) <= d["zeta_active_fwd"]
            _apply_correction(xy, sheet, active, k, zeta, model, inverse=False)
        return cover_step_batch(xy, sheet, model, inverse=False)
    out, new_sheet = cover_step_batch(xy, sheet, model, inverse=True)
    if not model.params.disabled:
        k, zeta = nearest_chart(out, model)
        active = np.abs(zeta) <= d["zeta_active_bwd"]
        _apply_correction(out, new_sheet, active, k, zeta, model, inverse=True)
    return out, new_sheet


def global_map(pt: SurfacePoint, model: ReferenceModel,
               inverse: bool = False) -> SurfacePoint:
    """One step of the corrected cover dynamics at a single point."""
    xy, sheet = global_map_batch(np.array([[pt.x, pt.y]]),
                                 np.array([pt.sheet]), model, inverse)
    return SurfacePoint(xy[0, 0], xy[0, 1], int(sheet[0]))


# ---------------------------------------------------------------------------
# Differential and invariant density


def _displaced(pt: SurfacePoint, delta: np.ndarray, model: ReferenceModel
               ) -> tuple[np.ndarray, int]:
    """Cover point reached from pt by a small plane displacement.

    The sheet is transported along the straight segment, so probes used by
    difference quotients stay on the same local branch of the cover even
    when they land across the cut.
    """
    p0 = np.array([pt.x, pt.y])
    p1 = p0 + delta
    flip = int(transport_parity(p0[None, :], p1[None, :], model)[0])
    return p1 % 1.0, pt.sheet ^ flip


def differential(pt: SurfacePoint, model: ReferenceModel, order: int = 2,
                 step: float | None = None) -> np.ndarray:
    """Differential of the corrected step at pt, in the eigenframe.

    Outside the chart-activation disks the step is linear and the exact
    matrix ``diag(lam, 1/lam)`` is returned.  Inside, central differences of
    the given order are taken along the eigen directions, with probe sheets
    transported across the cut.  The default step shrinks with the distance
    to the branch point (clipped to [1e-9, 1e-6]): the corrected step's
    derivative varies on a scale that shrinks with that distance, so a fixed
    step loses accuracy deep in the chart.  Raises ValueError within 1e-9
    (eigenframe distance) of a branch point, where the cone geometry leaves
    no single-valued differential.
    """
    d = model._derived
    _, zeta = nearest_chart(np.array([[pt.x, pt.y]]), model)
    r = abs(complex(zeta[0]))
    if r < 1e-9:
        raise ValueError("differential is not defined within 1e-9 of a branch point")
    if model.params.disabled or r > d["zeta_active_fwd"]:
        return np.diag([d["lam"], 1.0 / d["lam"]])
    if step is None:
        step = min(1e-6, max(r / 1e4, 1e-9))
    if order == 2:
        stencil = ((1.0, 0.5), (-1.0, -0.5))
    elif order == 4:
        stencil = ((1.0, 8.0 / 12.0), (-1.0, -8.0 / 12.0),
                   (2.0, -1.0 / 12.0), (-2.0, 1.0 / 12.0))
    else:
        raise ValueError(f"unsupported stencil order {order}")
    basis = d["basis"]
    cols = []
    for axis in range(2):
        # Stencil weights sum to zero, so differencing every probe output
        # against the first one removes any common wrap offset without
        # changing the derivative.
        acc = np.zeros(2)
        ref = None
        for mult, weight in stencil:
            delta = basis[:, axis] * (mult * step)
            xy_p, sh_p = _displaced(pt, delta, model)
            out_xy, _ = global_map_batch(xy_p[None, :], np.array([sh_p]), model)
            if ref is None:
                ref = out_xy[0]
            disp = out_xy[0] - ref
            disp -= np.round(disp)
            acc = acc + weight * (d["basis_inv"] @ disp)
        cols.append(acc / step)
    return np.column_stack(cols)


def surface_density(xy: np.ndarray, model: ReferenceModel) -> np.ndarray:
    """Invariant density of the corrected dynamics, per eigenframe area.

    Constant away from the branch points; inside the singular charts it is
    the chart density divided by the cone-chart area distortion 4|w|^2,
    which diverges like 1/|zeta| at the branch points while keeping finite
    total mass.  Normalized so the flat region has density 1/4.
    """
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    k, zeta = nearest_chart(xy, model)
    r = np.abs(zeta)
    out = np.full(xy.shape[0], 0.25)
    inside = (r > 0.0) & (r <= model.chart_radius)
    if np.any(inside):
        w = np.sqrt(r[inside])
        dens = invariant_density(w.astype(complex), model.params)
        out[inside] = np.asarray(dens, dtype=float) / (4.0 * w * w)
    out[r == 0.0] = np.inf
    return out


# ---------------------------------------------------------------------------
# Sampling and the Lyapunov exponent


def sample_area_arrays(seed: int, n: int, model: ReferenceModel
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic area-uniform sample of the cover, as arrays.

    Uniform on the torus times a fair sheet bit, which is the normalized
    area measure of the flat cover away from the (measure-zero) branch
    locus.  The same seed always yields the same points.  For parallel
    workers, split the stream with ``numpy.random.SeedSequence(seed).spawn``
    and give each worker one child sequence.
    """
    rng = np.random.default_rng(seed)
    xy = rng.random((n, 2))
    sheet = rng.integers(0, 2, size=n, dtype=np.int64)
    return xy, sheet


def sample_area(seed: int, n: int, model: ReferenceModel) -> list[SurfacePoint]:
    """Deterministic area-uniform sample of the cover, as SurfacePoints."""
    xy, sheet = sample_area_arrays(seed, n, model)
    return [SurfacePoint(float(x), float(y), int(s))
            for (x, y), s in zip(xy, sheet)]


def lyapunov_exponent(pt: SurfacePoint, n_steps: int, model: ReferenceModel,
                      direction: int = 1, order: int = 2) -> float:
    """Top Lyapunov exponent along the orbit of pt, per unit forward time.

    Tracks one tangent vector through the differential cocycle with
    renormalization each step.  ``direction=-1`` runs the orbit backward
    with the inverse-step differentials and reports the rate per unit of
    forward time (the negative of the backward-step growth rate); for the
    area-preserving dynamics this is the negative of the forward exponent.

    If the orbit lands within 1e-12 of a branch point the run restarts from
    a slightly nudged initial point; each restart is logged.  More than five
    restarts raise ConvergenceError.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be positive")
    if direction not in (1, -1):
        raise ValueError("direction must be +1 or -1")
    d = model._derived
    inverse = direction == -1
    for attempt in range(6):
        start = pt if attempt == 0 else SurfacePoint(
            pt.x + attempt * _RESTART_NUDGE, pt.y + attempt * _RESTART_NUDGE,
            pt.sheet)
        xy = np.array([[start.x, start.y]])
        sheet = np.array([start.sheet])
        vec = np.array([math.sqrt(0.5), math.sqrt(0.5)])
        total = 0.0
        hit = False
        for _ in range(n_steps):
            k, zeta = nearest_chart(xy, model)
            r = abs(complex(zeta[0]))
            if r < 1e-12:
                hit = True
                break
            if inverse:
                # The inverse correction acts at the image of the inverse
                # linear step, so the fast path must probe there, not here.
                pre = (xy @ d["mat_inv"].T) % 1.0
                _, zpre = nearest_chart(pre, model)
                linear = model.params.disabled or \
                    abs(complex(zpre[0])) > d["zeta_active_bwd"]
            else:
                linear = model.params.disabled or r > d["zeta_active_fwd"]
            if linear:
                jac = (np.diag([1.0 / d["lam"], d["lam"]]) if inverse
                       else np.diag([d["lam"], 1.0 / d["lam"]]))
            else:
                here = SurfacePoint(xy[0, 0], xy[0, 1], int(sheet[0]))
                jac = _inverse_step_differential(here, model, order) if inverse \
                    else differential(here, model, order)
            vec = jac @ vec
            norm = float(np.hypot(*vec))
            total += math.log(norm)
            vec /= norm
            xy, sheet = global_map_batch(xy, sheet, model, inverse=inverse)
        if not hit:
            rate = total / n_steps
            return -rate if inverse else rate
        logger.warning("orbit hit a branch point; restarting from a nudged "
                       "initial condition (attempt %d)", attempt + 1)
    raise ConvergenceError("orbit kept hitting branch points after 5 restarts")


def _inverse_step_differential(pt: SurfacePoint, model: ReferenceModel,
                               order: int, step: float | None = None
                               ) -> np.ndarray:
    """Differential of the inverse corrected step at pt, in the eigenframe.

    The default step scales with the chart radius of the inverse-step
    image, where the inverse correction acts and sets the derivative's
    variation scale.
    """
    d = model._derived
    if order == 2:
        stencil = ((1.0, 0.5), (-1.0, -0.5))
    elif order == 4:
        stencil = ((1.0, 8.0 / 12.0), (-1.0, -8.0 / 12.0),
                   (2.0, -1.0 / 12.0), (-2.0, 1.0 / 12.0))
    else:
        raise ValueError(f"unsupported stencil order {order}")
    if step is None:
        pre = (np.array([[pt.x, pt.y]]) @ d["mat_inv"].T) % 1.0
        _, zpre = nearest_chart(pre, model)
        step = min(1e-6, max(abs(complex(zpre[0])) / 1e4, 1e-9))
    basis = d["basis"]
    cols = []
    for axis in range(2):
        acc = np.zeros(2)
        ref = None
        for mult, weight in stencil:
            delta = basis[:, axis] * (mult * step)
            xy_p, sh_p = _displaced(pt, delta, model)
            out_xy, _ = global_map_batch(xy_p[None, :], np.array([sh_p]),
                                         model, inverse=True)
            if ref is None:
                ref = out_xy[0]
            disp = out_xy[0] - ref
            disp -= np.round(disp)
            acc = acc + weight * (d["basis_inv"] @ disp)
        cols.append(acc / step)
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# Serialization


_TEXT_FORMAT = "palab-reference-model-v1"


def model_to_text(model: ReferenceModel) -> str:
    """Serialize a model to plain key=value text, bit-exact for floats."""
    m = model.matrix
    lines = [
        f"format = {_TEXT_FORMAT}",
        f"matrix = {m[0][0]} {m[0][1]} {m[1][0]} {m[1][1]}",
    ]
    for i, bp in enumerate(model.branch_points):
        lines.append(f"branch_point_{i} = {bp[0]} {bp[1]}")
    lines.append(f"cut_offset = {model.cut_offset[0]} {model.cut_offset[1]}")
    lines.append(f"base_point = {model.base_point[0]!r} {model.base_point[1]!r}")
    lines.append(f"default_seed = {model.default_seed}")
    prm = model.params
    lines.append(f"param_p = {prm.p}")
    for name in ("alpha", "lam", "rho0", "rho1", "a_star", "mu"):
        lines.append(f"param_{name} = {getattr(prm, name)!r}")
    lines.append(f"param_disabled = {int(prm.disabled)}")
    return "\n".join(lines) + "\n"


def model_from_text(text: str) -> ReferenceModel:
    """Reconstruct a model serialized by model_to_text, bit for bit."""
    fields: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    if fields.get("format") != _TEXT_FORMAT:
        raise ValueError(f"unrecognized model format {fields.get('format')!r}")
    mm = [int(t) for t in fields["matrix"].split()]
    branch = []
    for i in range(2):
        parts = fields[f"branch_point_{i}"].split()
        branch.append((Fraction(parts[0]), Fraction(parts[1])))
    cut = tuple(int(t) for t in fields["cut_offset"].split())
    base = tuple(float(t) for t in fields["base_point"].split())
    prm = SlowdownParams(
        p=int(fields["param_p"]),
        alpha=float(fields["param_alpha"]),
        lam=float(fields["param_lam"]),
        rho0=float(fields["param_rho0"]),
        rho1=float(fields["param_rho1"]),
        a_star=float(fields["param_a_star"]),
        mu=float(fields["param_mu"]),
        disabled=bool(int(fields["param_disabled"])),
    )
    return ReferenceModel(matrix=((mm[0], mm[1]), (mm[2], mm[3])),
                          branch_points=(tuple(branch[0]), tuple(branch[1])),
                          cut_offset=(cut[0], cut[1]),
                          base_point=(base[0], base[1]),
                          params=prm,
                          default_seed=int(fields["default_seed"]))


def reference_model(params: SlowdownParams | None = None) -> ReferenceModel:
    """The default reference model, optionally with custom chart constants."""
    if params is None:
        return ReferenceModel()
    return ReferenceModel(params=params)
