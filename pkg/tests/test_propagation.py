import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinprior import autodiff as ad
from kinprior.core import AgentProfile, Gaussian1D, Gaussian2D, KinematicDist
from kinprior.errors import ControlLengthMismatch, LinearizationDomain, NonFiniteInput, SteeringDomain
from kinprior.oracle import deterministic_rollout, mc_rollout
from kinprior.propagation import (
    LinearizedTrig,
    accumulated_bounds,
    lagrange_bound,
    propagate_f1,
    propagate_f2,
    propagate_f3,
    propagate_f4,
    rollout,
    rollout_batched,
    rollout_error_bounds,
)

G = Gaussian1D
ZERO = G(0.0, 0.0)


def origin(sx=0.0, sy=0.0):
    return Gaussian2D(0.0, 0.0, sx, sy)


class TestLinearizedTrig:
    @given(st.floats(-10, 10))
    def test_unit_circle(self, mu):
        t = LinearizedTrig.at(mu)
        assert abs(t.sin_at_mu**2 + t.cos_at_mu**2 - 1) <= 1e-12

    def test_exact_at_base(self):
        t = LinearizedTrig.at(0.7)
        assert t.sin(0.7) == math.sin(0.7)
        assert t.cos(0.7) == math.cos(0.7)


class TestLagrangeBound:
    def test_values(self):
        assert lagrange_bound(0.0).per_step == 0.0
        assert lagrange_bound(0.1).per_step == pytest.approx(0.005)

    def test_accumulates(self):
        b = accumulated_bounds([0.1, 0.2, 0.0])
        assert [x.accumulated for x in b] == pytest.approx([0.005, 0.025, 0.025])


class TestF1:
    def test_deterministic(self):
        p = propagate_f1(origin(), (G(2.0, 0.0), ZERO), 0.1)
        assert p.mu_x == pytest.approx(0.2)
        assert p.sigma_x == 0.0

    def test_three_four_five(self):
        p = propagate_f1(origin(0.3), (G(0, 0.4), ZERO), 1.0)
        assert p.sigma_x == pytest.approx(0.5, rel=1e-15)

    def test_rho_carried(self):
        pos = Gaussian2D(0, 0, 1, 1, 0.4)
        assert propagate_f1(pos, (G(1, 1), G(1, 1)), 0.1).rho == 0.4

    def test_matches_monte_carlo(self):
        init = KinematicDist("f1", origin(0.2), vx=ZERO, vy=ZERO)
        mc = mc_rollout(init, [(G(0.0, 1.0), ZERO)], AgentProfile(4.5, 0.1), 1, 10**6, seed=1)[0]
        p = propagate_f1(origin(0.2), (G(0.0, 1.0), ZERO), 0.1)
        assert abs(p.sigma_x - mc.std_x) <= 5 * mc.se_std_x

    def test_non_finite(self):
        with pytest.raises(NonFiniteInput):
            propagate_f1(origin(), (G(float("nan"), 0), ZERO), 0.1)


class TestF2:
    def test_direct(self):
        vx, _ = propagate_f2((G(1.0, 0.0), ZERO), (G(2.0, 2.0), ZERO), 0.5)
        assert (vx.mu, vx.sigma) == pytest.approx((2.0, 1.0))

    def test_quadrature(self):
        vx, _ = propagate_f2((G(0, 0.6), ZERO), (G(0, 0.8), ZERO), 1.0)
        assert vx.sigma == pytest.approx(1.0)

    def test_two_step_matches_monte_carlo(self):
        init = KinematicDist("f2", origin(), vx=G(3.0, 0.5), vy=G(-1.0, 0.2), ax=ZERO, ay=ZERO)
        controls = [(G(1.0, 0.7), G(0.5, 0.3)), (G(-0.5, 0.4), G(0.2, 0.9))]
        prof = AgentProfile(4.5, 0.5)
        an = rollout(init, controls, prof, 2)
        mc = mc_rollout(init, controls, prof, 2, 10**6, seed=2)
        for a, m in zip(an, mc):
            assert abs(a.sigma_x - m.std_x) <= 5 * m.se_std_x
            assert abs(a.sigma_y - m.std_y) <= 5 * m.se_std_y

    def test_zero_accel_variance_degenerates_to_f1(self):
        vel = (G(2.0, 0.3), G(-1.0, 0.4))
        new_v = propagate_f2(vel, (G(0.0, 0.0), G(0.0, 0.0)), 0.1)
        pos = Gaussian2D(1.0, 2.0, 0.1, 0.2, 0.3)
        via_f2 = propagate_f1(pos, new_v, 0.1)
        via_f1 = propagate_f1(pos, vel, 0.1)
        assert via_f2 == via_f1


class TestF3:
    def test_zero_heading(self):
        p = propagate_f3(Gaussian2D(1.0, 0.0, 0.0, 0.7), G(10.0, 0.5), G(0.0, 0.0), 0.1)
        assert p.mu_x == pytest.approx(2.0)
        assert p.sigma_x == pytest.approx(0.05)
        assert p.sigma_y == pytest.approx(0.7)

    def test_quarter_turn(self):
        p = propagate_f3(origin(), G(10.0, 0.0), G(math.pi / 2, 0.1), 0.1)
        assert p.sigma_x == pytest.approx(0.1)

    def test_matches_f1_when_heading_is_zero(self):
        pos = Gaussian2D(0.5, -0.5, 0.2, 0.3, 0.1)
        a = propagate_f3(pos, G(7.0, 0.4), G(0.0, 0.0), 0.1)
        b = propagate_f1(pos, (G(7.0, 0.4), ZERO), 0.1)
        assert (a.mu_x, a.mu_y, a.sigma_x, a.sigma_y, a.rho) == pytest.approx((b.mu_x, b.mu_y, b.sigma_x, b.sigma_y, b.rho))

    def test_matches_exact_trig_monte_carlo(self):
        init = KinematicDist("f3", origin(), speed=ZERO, heading=ZERO)
        controls = [(G(8.0, 0.4), G(0.3, 0.05))]
        mc = mc_rollout(init, controls, AgentProfile(4.5, 0.1), 1, 10**6, seed=3)[0]
        p = propagate_f3(origin(), G(8.0, 0.4), G(0.3, 0.05), 0.1)
        bound = lagrange_bound(0.05).per_step
        assert abs(p.sigma_x - mc.std_x) <= bound + 5 * mc.se_std_x
        assert abs(p.sigma_y - mc.std_y) <= bound + 5 * mc.se_std_y

    def test_domain(self):
        with pytest.raises(LinearizationDomain):
            propagate_f3(origin(), G(1, 0), G(0, math.pi / 2), 0.1)


class TestF4:
    def test_zero_steering(self):
        s, th = propagate_f4(G(8.0, 0.0), G(0.2, 0.0), ZERO, G(0.0, 0.05), 4.0, 0.1)
        assert th.mu == 0.2
        assert th.sigma == pytest.approx(0.01)

    def test_deterministic_accel(self):
        s, _ = propagate_f4(G(5.0, 0.2), ZERO, G(1.0, 0.0), ZERO, 4.0, 0.5)
        assert (s.mu, s.sigma) == pytest.approx((5.5, 0.2))

    def test_heading_spread_matches_exact_tan(self):
        init = KinematicDist("f4", origin(), speed=G(6.0, 0.3), heading=ZERO, accel=ZERO, steer=ZERO)
        controls = [(ZERO, G(0.2, 0.03))]
        _, th = propagate_f4(G(6.0, 0.3), ZERO, ZERO, G(0.2, 0.03), 4.0, 0.1)
        # sample the heading directly: theta' = s * tan(delta) * dt / L
        rng = np.random.default_rng(4)
        n = 10**6
        samples = rng.normal(6.0, 0.3, n) * np.tan(rng.normal(0.2, 0.03, n)) * 0.1 / 4.0
        se = samples.std(ddof=1) / math.sqrt(2 * (n - 1))
        tan_bound = 0.5 * 2 * math.tan(0.32) / math.cos(0.32) ** 2 * 0.03**2 * 6.3 * 0.1 / 4.0
        assert abs(th.sigma - samples.std(ddof=1)) <= tan_bound + 5 * se
        assert init.formulation.value == "f4" and len(controls) == 1

    def test_printed_vs_quadrature(self):
        args = (G(5.0, 0.3), ZERO, G(0.0, 0.4), ZERO, 4.0, 0.5)
        printed, _ = propagate_f4(*args, sigma_mode="printed")
        quad, _ = propagate_f4(*args, sigma_mode="quadrature")
        assert printed.sigma == pytest.approx(0.5)
        assert quad.sigma == pytest.approx(math.hypot(0.3, 0.2))
        assert printed.sigma >= quad.sigma

    def test_modes_agree_without_accel_spread(self):
        args = (G(5.0, 0.3), G(0.1, 0.05), G(1.0, 0.0), G(0.1, 0.02), 4.0, 0.1)
        assert propagate_f4(*args, sigma_mode="printed") == propagate_f4(*args, sigma_mode="quadrature")

    def test_domain(self):
        with pytest.raises(SteeringDomain):
            propagate_f4(G(1, 0), ZERO, ZERO, G(math.pi / 2, 0.0), 4.0, 0.1)
        with pytest.raises(LinearizationDomain):
            propagate_f4(G(1, 0), ZERO, ZERO, G(0.0, math.pi / 4), 4.0, 0.1)


class TestRollout:
    def test_straight_line(self):
        init = KinematicDist("f1", origin(), vx=ZERO, vy=ZERO)
        out = rollout(init, [(G(2.0, 0.0), ZERO)] * 5, AgentProfile(4.5, 0.1), 5)
        assert [p.mu_x for p in out] == pytest.approx([0.2, 0.4, 0.6, 0.8, 1.0])
        assert all(p.sigma_x == 0 for p in out)

    def test_sqrt_t(self):
        init = KinematicDist("f1", origin(), vx=ZERO, vy=ZERO)
        out = rollout(init, [(G(0.0, 1.0), ZERO)] * 6, AgentProfile(4.5, 1.0), 6)
        assert [p.sigma_x for p in out] == pytest.approx([math.sqrt(t) for t in range(1, 7)], rel=1e-14)

    def test_length_mismatch(self):
        init = KinematicDist("f1", origin(), vx=ZERO, vy=ZERO)
        with pytest.raises(ControlLengthMismatch):
            rollout(init, [(ZERO, ZERO)] * 3, AgentProfile(4.5, 0.1), 4)

    def test_f4_within_bounds_of_monte_carlo(self):
        init = KinematicDist("f4", origin(), speed=G(9.0, 0.0), heading=G(0.4, 0.0), accel=ZERO, steer=ZERO)
        rng = np.random.default_rng(5)
        controls = [(G(rng.uniform(-1, 1), 0.5), G(rng.uniform(-0.2, 0.2), 0.08)) for _ in range(20)]
        prof = AgentProfile(4.0, 0.1)
        an = rollout(init, controls, prof, 20, "quadrature")
        bounds = rollout_error_bounds(init, controls, prof, 20, "quadrature")
        mc = mc_rollout(init, controls, prof, 20, 10**6, seed=6)
        for a, b, m in zip(an, bounds, mc):
            assert abs(a.mu_x - m.mean_x) <= b.mean + 5 * m.se_mean_x
            assert abs(a.mu_y - m.mean_y) <= b.mean + 5 * m.se_mean_y
            assert abs(a.sigma_x - m.std_x) <= b.sigma + 5 * m.se_std_x
            assert abs(a.sigma_y - m.std_y) <= b.sigma + 5 * m.se_std_y

    @pytest.mark.parametrize("form", ["f1", "f2", "f3", "f4"])
    def test_zero_variance_reproduces_euler(self, form):
        rng = np.random.default_rng(7)
        start = {"x": 1.0, "y": -2.0, "vx": 3.0, "vy": 1.0, "speed": 6.0, "heading": 0.3}
        means = [(float(rng.uniform(-2, 2)), float(rng.uniform(-0.3, 0.3))) for _ in range(15)]
        pos = Gaussian2D(start["x"], start["y"], 0.0, 0.0)
        fields = {
            "f1": dict(vx=ZERO, vy=ZERO),
            "f2": dict(vx=G(3.0, 0), vy=G(1.0, 0), ax=ZERO, ay=ZERO),
            "f3": dict(speed=ZERO, heading=ZERO),
            "f4": dict(speed=G(6.0, 0), heading=G(0.3, 0), accel=ZERO, steer=ZERO),
        }[form]
        init = KinematicDist(form, pos, **fields)
        out = rollout(init, [(G(a, 0.0), G(b, 0.0)) for a, b in means], AgentProfile(4.2, 0.1), 15)
        ref = deterministic_rollout(form, start, means, 4.2, 0.1)
        for p, (x, y) in zip(out, ref):
            assert abs(p.mu_x - x) <= 1e-12 and abs(p.mu_y - y) <= 1e-12
            assert p.sigma_x == 0 and p.sigma_y == 0

    @settings(max_examples=40, deadline=None)
    @given(form=st.sampled_from(["f1", "f2", "f3", "f4"]), seed=st.integers(0, 2**20))
    def test_position_sigma_never_contracts(self, form, seed):
        rng = np.random.default_rng(seed)
        pos = Gaussian2D(0.0, 0.0, *rng.uniform(0, 1, 2))
        fields = {
            "f1": dict(vx=ZERO, vy=ZERO),
            "f2": dict(vx=G(1.0, 0.1), vy=G(0.0, 0.1), ax=ZERO, ay=ZERO),
            "f3": dict(speed=ZERO, heading=ZERO),
            "f4": dict(speed=G(5.0, 0.2), heading=G(0.0, 0.0), accel=ZERO, steer=ZERO),
        }[form]
        init = KinematicDist(form, pos, **fields)
        if form in ("f3", "f4"):
            controls = [(G(rng.uniform(-2, 10), rng.uniform(0, 1)), G(rng.uniform(-0.4, 0.4), rng.uniform(0, 0.1)))
                        for _ in range(12)]
        else:
            controls = [(G(*rng.uniform([-5, 0], [5, 2])), G(*rng.uniform([-5, 0], [5, 2]))) for _ in range(12)]
        out = rollout(init, controls, AgentProfile(4.0, 0.1), 12)
        sx = [float(pos.sigma_x)] + [p.sigma_x for p in out]
        sy = [float(pos.sigma_y)] + [p.sigma_y for p in out]
        assert all(b >= a - 1e-15 for a, b in zip(sx, sx[1:]))
        assert all(b >= a - 1e-15 for a, b in zip(sy, sy[1:]))

    def test_bounds_zero_for_exact_formulations(self):
        init = KinematicDist("f1", origin(), vx=ZERO, vy=ZERO)
        bounds = rollout_error_bounds(init, [(G(1, 1), G(1, 1))] * 3, AgentProfile(4.5, 0.1), 3)
        assert all(b.mean == 0 and b.sigma == 0 for b in bounds)


class TestBatched:
    @pytest.mark.parametrize("form", ["f1", "f2", "f3", "f4"])
    @pytest.mark.parametrize("mode", ["printed", "quadrature"])
    def test_matches_sequential_rollout(self, form, mode):
        rng = np.random.default_rng(8)
        T = 7
        m1 = rng.uniform(-2, 8, T)
        s1 = rng.uniform(0, 1, T)
        m2 = rng.uniform(-0.3, 0.3, T)
        s2 = rng.uniform(0, 0.1, T)
        start = {"x": 0.5, "y": -0.5, "vx": 4.0, "vy": -1.0, "speed": 5.0, "heading": 0.2}
        pos = Gaussian2D(0.5, -0.5, 0.0, 0.0)
        fields = {
            "f1": dict(vx=ZERO, vy=ZERO),
            "f2": dict(vx=G(4.0, 0), vy=G(-1.0, 0), ax=ZERO, ay=ZERO),
            "f3": dict(speed=ZERO, heading=ZERO),
            "f4": dict(speed=G(5.0, 0), heading=G(0.2, 0), accel=ZERO, steer=ZERO),
        }[form]
        seq = rollout(KinematicDist(form, pos, **fields), [(G(m1[t], s1[t]), G(m2[t], s2[t])) for t in range(T)],
                      AgentProfile(4.0, 0.1), T, mode)
        mx, my, sx, sy = rollout_batched(form, (m1, s1, m2, s2), 0.1, 4.0, start=start, sigma_mode=mode)
        np.testing.assert_allclose(mx, [p.mu_x for p in seq], rtol=0, atol=1e-12)
        np.testing.assert_allclose(my, [p.mu_y for p in seq], rtol=0, atol=1e-12)
        np.testing.assert_allclose(sx, [p.sigma_x for p in seq], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(sy, [p.sigma_y for p in seq], rtol=1e-10, atol=1e-12)


class TestGradients:
    def test_f1_step(self):
        def f(mx, sx, mv, sv):
            p = propagate_f1(Gaussian2D(mx, 0.0, sx, 0.3), (G(mv, sv), G(0.0, 0.2)), 0.1)
            return p.mu_x * p.sigma_x + p.sigma_y

        assert ad.finite_diff_check(f, [0.3, 0.4, 2.0, 0.7]).passed

    def test_f2_step(self):
        def f(mv, sv, ma, sa):
            vx, _ = propagate_f2((G(mv, sv), G(0.0, 0.1)), (G(ma, sa), G(0.0, 0.1)), 0.2)
            return vx.mu * vx.sigma

        assert ad.finite_diff_check(f, [1.5, 0.4, -0.7, 0.9]).passed

    def test_f3_sigma_x_all_inputs(self):
        def f(mx, sx, ms, ss, mt, stt):
            return propagate_f3(Gaussian2D(mx, 0.0, sx, 0.2), G(ms, ss), G(mt, stt), 0.1).sigma_x

        rep = ad.finite_diff_check(f, [0.1, 0.3, 8.0, 0.4, 0.3, 0.05])
        assert rep.passed, rep.failures

    def test_f4_full_chain(self):
        def f(ms, ss, mt, stt, ma, sa, md, sd):
            init = KinematicDist("f4", Gaussian2D(0.0, 0.0, 0.1, 0.1), speed=G(ms, ss), heading=G(mt, stt),
                                 accel=ZERO, steer=ZERO)
            out = rollout(init, [(G(ma, sa), G(md, sd))] * 3, AgentProfile(4.0, 0.1), 3)
            return out[-1].mu_x + out[-1].mu_y * out[-1].sigma_x + out[-1].sigma_y

        rep = ad.finite_diff_check(f, [6.0, 0.3, 0.2, 0.02, 0.5, 0.3, 0.1, 0.03])
        assert rep.passed, rep.failures
