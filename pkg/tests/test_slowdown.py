"""Tests for the taper profile, the slowed flow, and the decay exponents."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import rk_flow
from palab.slowdown import (
    DecayExponents,
    SlowdownParams,
    axis_decay,
    decay_exponents,
    flow_map,
    hamiltonian,
    orbit_clock,
    plane_params,
    slow_factor,
    surface_params,
    taper_antideriv,
)

PLANE = plane_params()
SURFACE = surface_params()
LAM = 2.0 + math.sqrt(3.0)


class TestParams:
    def test_surface_defaults_construct(self):
        p = SlowdownParams()
        assert p.r0 == pytest.approx(p.rho0 ** 2 / 2.0, rel=1e-15)
        assert p.r1 == pytest.approx(p.rho1 ** 2 / 2.0, rel=1e-15)
        assert p.a_tilde == pytest.approx(p.a_star ** 2 / 2.0, rel=1e-15)
        # containments reduce to radius inequalities for the linear map
        assert p.r1 <= p.r0 / p.lam
        assert p.lam * p.r0 <= p.a_tilde

    def test_plane_factory_respects_rules(self):
        p = plane_params(r1=0.3)
        assert p.r1 == pytest.approx(0.3, rel=1e-12)
        assert p.r0 == pytest.approx(4.0 * LAM * 0.3, rel=1e-12)
        assert p.taper_end == pytest.approx(p.r0 / (2.0 * LAM), rel=1e-15)

    def test_push_blend_inside_trigger(self):
        # the identity zone of the mass-push must start inside the 0.8*r0
        # trigger even after one linear expansion step, and the blend window
        # must start above the pure-power zone and stay wide (a narrow window
        # concentrates the blend into violent higher derivatives)
        for p in (PLANE, SURFACE):
            assert p.lam * p.push_hi < 0.8 * p.r0
            assert p.push_lo > p.r1
            assert p.push_hi > 2.5 * p.push_lo

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            SlowdownParams(alpha=0.0)
        with pytest.raises(ValueError):
            SlowdownParams(alpha=1.5)
        with pytest.raises(ValueError):
            SlowdownParams(mu=0.7)
        with pytest.raises(ValueError):
            SlowdownParams(lam=0.5)
        with pytest.raises(ValueError):
            SlowdownParams(rho1=0.3)  # rho1 > rho0
        with pytest.raises(ValueError):
            # taper headroom: rho1 barely below rho0 violates r0 >= 4*lam*r1
            SlowdownParams(rho1=0.19)

    def test_derived_constants(self):
        p = plane_params(alpha=0.2)
        assert p.a_coeff == pytest.approx(1.0556063286183154, rel=1e-12)
        assert p.rate_const == pytest.approx(0.6950945452588518, rel=1e-12)
        assert p.push_exponent == pytest.approx(1.6, rel=1e-15)
        assert p.eps_smooth == pytest.approx(0.5, rel=1e-12)
        assert p.log_lam == pytest.approx(1.3169578969248167, rel=1e-15)


class TestTaper:
    def test_zone_values(self):
        p = PLANE
        assert slow_factor(0.0, p) == 0.0
        assert slow_factor(p.r0 ** 2, p) == 1.0
        assert slow_factor(p.taper_end ** 2, p) == 1.0
        assert slow_factor(2.0, p) == 1.0 if 2.0 >= p.taper_end ** 2 else True
        # pure-power zone: frozen direct evaluation at u = 0.01 <= r1**2
        assert 0.01 <= p.r1 ** 2
        assert slow_factor(0.01, p) == pytest.approx(0.5253055608807534, rel=1e-12)

    def test_continuous_at_zone_edges(self):
        p = PLANE
        for edge in (p.r1 ** 2, p.taper_end ** 2):
            below = slow_factor(edge * (1.0 - 1e-9), p)
            above = slow_factor(edge * (1.0 + 1e-9), p)
            assert above == pytest.approx(below, rel=1e-6)

    def test_monotone_grid(self):
        p = PLANE
        grid = np.linspace(0.0, 1.5 * p.taper_end ** 2, 10_000)
        vals = slow_factor(grid, p)
        assert np.min(np.diff(vals)) >= -1e-12

    @given(st.floats(min_value=0.0, max_value=1.0), st.floats(min_value=0.0, max_value=1.0))
    @settings(max_examples=60, deadline=None)
    def test_monotone_property(self, f1, f2):
        p = PLANE
        hi = 1.5 * p.taper_end ** 2
        u1, u2 = sorted((f1 * hi, f2 * hi))
        assert slow_factor(u1, p) <= slow_factor(u2, p) + 1e-15

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            slow_factor(-1.0, PLANE)
        with pytest.raises(ValueError):
            slow_factor(float("nan"), PLANE)

    def test_antideriv_matches_quadrature(self):
        from scipy.integrate import quad
        p = PLANE
        for big_r in (0.5 * p.r1 ** 2, p.r1 ** 2, 2.0 * p.r1 ** 2,
                      0.7 * p.taper_end ** 2, p.taper_end ** 2, 3.0 * p.taper_end ** 2):
            direct, _ = quad(lambda u: 1.0 / slow_factor(u, p), 0.0, big_r,
                             limit=400, points=[p.r1 ** 2] if big_r > p.r1 ** 2 else None)
            assert taper_antideriv(big_r, p) == pytest.approx(direct, rel=1e-9)

    def test_control_profile_flat(self):
        p = PLANE.control()
        grid = np.linspace(0.0, 1.0, 64)
        assert np.all(slow_factor(grid, p) == 1.0)
        assert taper_antideriv(0.37, p) == pytest.approx(0.37, rel=1e-15)


class TestFlow:
    def test_fixed_point_and_axes(self):
        p = PLANE
        assert flow_map(0.0, 0.0, 1.0, p) == (0.0, 0.0)
        # contracting axis, orbit inside the pure-power zone: frozen closed form
        out = flow_map(0.0, 0.25, 1.7, p)
        assert out[0] == 0.0
        assert out[1] == pytest.approx(0.06847253768793866, rel=1e-12)
        assert out[1] == pytest.approx(axis_decay(0.25, 1.7, p), rel=1e-15)

    def test_axis_expand_inverts_contract(self):
        p = PLANE
        down = flow_map(0.0, 0.25, 2.3, p)[1]
        back = flow_map(down, 0.0, 2.3, p)[0]
        # the expanding axis is the time-reverse of the contracting one
        assert back == pytest.approx(0.25, rel=1e-11)

    def test_linear_outside_taper(self):
        p = PLANE
        rng = np.random.default_rng(7)
        for _ in range(50):
            # s1 >= r0 guarantees the whole forward orbit stays outside D_r0
            s1 = p.r0 * (1.0 + rng.uniform(0.0, 0.3))
            s2 = rng.uniform(-p.r0, p.r0)
            t = rng.uniform(0.1, 1.0)
            o1, o2 = flow_map(s1, s2, t, p)
            assert o1 == pytest.approx(s1 * p.lam ** t, rel=1e-12)
            assert o2 == pytest.approx(s2 * p.lam ** -t, rel=1e-12)

    def test_product_conserved(self):
        p = PLANE
        rng = np.random.default_rng(11)
        for _ in range(200):
            r = p.r0 * 10.0 ** rng.uniform(-6.0, 0.0)
            th = rng.uniform(0.0, 2.0 * math.pi)
            s1, s2 = r * math.cos(th), r * math.sin(th)
            t = rng.uniform(0.0, 5.0)
            o1, o2 = flow_map(s1, s2, t, p)
            prod0, prod1 = s1 * s2, o1 * o2
            assert abs(prod1 - prod0) <= 1e-10 * max(1.0, abs(prod0))

    def test_quadrant_preserved(self):
        p = PLANE
        rng = np.random.default_rng(13)
        for _ in range(40):
            s1 = rng.uniform(-p.r1, p.r1)
            s2 = rng.uniform(-p.r1, p.r1)
            o1, o2 = flow_map(s1, s2, rng.uniform(0.0, 3.0), p)
            assert math.copysign(1, o1) == math.copysign(1, s1) or o1 == 0
            assert math.copysign(1, o2) == math.copysign(1, s2) or o2 == 0

    def test_group_property(self):
        p = PLANE
        rng = np.random.default_rng(17)
        for _ in range(30):
            r = p.r1 * 10.0 ** rng.uniform(-3.0, 0.5)
            th = rng.uniform(0.05, 0.45 * math.pi)
            s1, s2 = r * math.cos(th), r * math.sin(th)
            mid = flow_map(*flow_map(s1, s2, 0.5, p), 0.5, p)
            whole = flow_map(s1, s2, 1.0, p)
            assert mid[0] == pytest.approx(whole[0], rel=1e-9, abs=1e-12)
            assert mid[1] == pytest.approx(whole[1], rel=1e-9, abs=1e-12)

    def test_forward_backward_roundtrip(self):
        p = PLANE
        rng = np.random.default_rng(19)
        for _ in range(30):
            r = p.r1 * 10.0 ** rng.uniform(-4.0, 0.8)
            th = rng.uniform(0.0, 2.0 * math.pi)
            s1, s2 = r * math.cos(th), r * math.sin(th)
            b1, b2 = flow_map(*flow_map(s1, s2, 1.0, p), -1.0, p)
            assert b1 == pytest.approx(s1, rel=1e-10, abs=1e-15)
            assert b2 == pytest.approx(s2, rel=1e-10, abs=1e-15)

    def test_matches_rk_oracle(self):
        p = PLANE
        rng = np.random.default_rng(23)
        for _ in range(25):
            r = p.r0 * 10.0 ** rng.uniform(-4.0, -0.05)
            th = rng.uniform(0.02, 0.48 * math.pi)
            s1, s2 = r * math.cos(th), r * math.sin(th)
            t = rng.uniform(0.2, 2.5)
            got = flow_map(s1, s2, t, p)
            want = rk_flow(s1, s2, t, p)
            assert got[0] == pytest.approx(want[0], rel=1e-9, abs=1e-13)
            assert got[1] == pytest.approx(want[1], rel=1e-9, abs=1e-13)

    def test_clock_agrees_with_stepping(self):
        p = PLANE
        s1, s2 = 1e-4, 0.28
        clock = orbit_clock(s1, s2, p)
        xi0 = math.log(s1)
        times = np.array([0.0, 1.0, 2.5, 7.0, 19.0])
        xis = clock.positions(xi0, times)
        for t, xi in zip(times, xis):
            direct = flow_map(s1, s2, float(t), p)
            assert math.exp(xi) == pytest.approx(direct[0], rel=1e-9)
        # and time_between inverts positions
        assert clock.time_between(xi0, float(xis[-1])) == pytest.approx(19.0, rel=1e-10)

    def test_control_is_pure_linear(self):
        p = PLANE.control()
        o1, o2 = flow_map(1e-7, 2e-6, 1.0, p)
        assert o1 == pytest.approx(1e-7 * LAM, rel=1e-15)
        assert o2 == pytest.approx(2e-6 / LAM, rel=1e-15)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            flow_map(float("inf"), 0.0, 1.0, PLANE)
        with pytest.raises(ValueError):
            flow_map(0.0, 1.0, float("nan"), PLANE)


class TestHamiltonian:
    def test_values(self):
        assert hamiltonian(0.0, 0.3, PLANE) == 0.0
        assert hamiltonian(1.0, 1.0, PLANE) == pytest.approx(1.3169578969248167, rel=1e-15)

    def test_conserved_by_flow(self):
        p = PLANE
        rng = np.random.default_rng(29)
        for _ in range(30):
            s1 = rng.uniform(-p.r1, p.r1)
            s2 = rng.uniform(-p.r1, p.r1)
            h0 = hamiltonian(s1, s2, p)
            h1 = hamiltonian(*flow_map(s1, s2, 1.0, p), p)
            assert abs(h1 - h0) <= 1e-10 * max(1.0, abs(h0))


class TestDecayExponents:
    def test_reference_values(self):
        e = decay_exponents(0.2, 0.25)
        assert e.gamma == pytest.approx(3.3429364718731469, rel=1e-12)
        assert e.gamma_prime == pytest.approx(2.6632282306180233, rel=1e-12)

    def test_identities(self):
        e = decay_exponents(0.2, 0.25)
        inv = 1.0 / (2.0 * 0.2)
        assert e.gamma == pytest.approx(e.beta1 + inv, rel=1e-14)
        assert e.gamma_prime == pytest.approx(e.beta + inv, rel=1e-14)
        assert e.beta2 == pytest.approx(e.beta1 + 2.0, rel=1e-14)

    @given(st.floats(min_value=0.01, max_value=0.2499),
           st.floats(min_value=0.01, max_value=0.4999))
    @settings(max_examples=80, deadline=None)
    def test_ordering_property(self, alpha, mu):
        e = decay_exponents(alpha, mu)
        assert e.gamma > e.gamma_prime > 2.0

    def test_spread_limit(self):
        alpha = 0.2
        e = decay_exponents(alpha, 1.0 - 1e-9)
        assert e.gamma - e.gamma_prime == pytest.approx(2.0 ** alpha, abs=1e-6)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            decay_exponents(0.0, 0.25)
        with pytest.raises(ValueError):
            decay_exponents(0.2, 1.0)
