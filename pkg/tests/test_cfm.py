import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import platoon_histories, random_idm
from kinprior import autodiff as ad
from kinprior import cfm
from kinprior.core import Gaussian2D, Trajectory, mixture_density
from kinprior.errors import CollisionState, DataError, InvalidAlpha, InvalidHistory, ZeroVector

P = cfm.IdmParams(v0=30.0, T_headway=1.5, s0=2.0, a_max=1.5, b_comf=2.0)


def scalar_idm(v, gap, dv, p):
    """Plain-float IDM written independently of the package."""
    s_star = max(0.0, p.s0 + v * p.T_headway + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comf)))
    return p.a_max * (1.0 - (v / p.v0) ** 4 - (s_star / gap) ** 2)


class TestParams:
    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            cfm.IdmParams(v0=0.0)

    def test_rejects_above_bound(self):
        with pytest.raises(ValueError):
            cfm.IdmParams(v0=61.0)

    def test_projection(self):
        p = cfm.IdmParams(v0=0.5, s0=10.0).projected()
        assert p.v0 == 1.0 and p.s0 == 10.0

    def test_vector_round_trip(self):
        assert cfm.IdmParams.from_vector(P.as_vector()) == P


class TestIdmAccel:
    def test_free_road_start(self):
        assert cfm.idm_accel(0.0, 1e9, 0.0, P) == pytest.approx(1.5, rel=1e-12)

    def test_desired_speed(self):
        assert cfm.idm_accel(30.0, 1e9, 0.0, P) == pytest.approx(0.0, abs=1e-12)

    def test_jam_gap(self):
        assert cfm.idm_accel(0.0, 2.0, 0.0, P) == 0.0

    def test_collision(self):
        with pytest.raises(CollisionState):
            cfm.idm_accel(5.0, 0.0, 0.0, P)

    @settings(max_examples=100, deadline=None)
    @given(v=st.floats(0, 40), gap=st.floats(0.5, 100), dv=st.floats(-10, 10))
    def test_matches_scalar_reference(self, v, gap, dv):
        assert cfm.idm_accel(v, gap, dv, P) == pytest.approx(scalar_idm(v, gap, dv, P), rel=1e-12, abs=1e-12)

    def test_gradient(self):
        def f(v, gap, dv, *theta):
            return cfm.idm_accel(v, gap, dv, cfm.IdmParams(*theta))

        rep = ad.finite_diff_check(f, [12.0, 25.0, 1.5, 30.0, 1.5, 2.0, 1.5, 2.0])
        assert rep.passed, rep.failures()


class TestSimStep:
    def test_single_vehicle_at_desired_speed(self):
        s = cfm.SimState(np.array([5.0]), np.array([30.0]), [-1], [4.5], 0.1)
        out = cfm.sim_step(s, [P])
        assert float(out.positions[0]) == pytest.approx(8.0)
        assert float(out.speeds[0]) == pytest.approx(30.0, abs=1e-12)

    def test_queue_at_rest_is_equilibrium(self):
        s = cfm.SimState(np.array([10.0, 3.5]), np.array([0.0, 0.0]), [-1, 0], [4.5, 4.5], 0.1)
        out = cfm.sim_step(s, [P, P], cfm.SpeedProfile.constant(0.0))
        np.testing.assert_array_equal(out.positions, s.positions)
        np.testing.assert_array_equal(out.speeds, s.speeds)

    def test_speed_floor(self):
        # follower far too close and slow: raw Euler speed would go negative
        s = cfm.SimState(np.array([10.0, 5.0]), np.array([0.0, 0.5]), [-1, 0], [4.5, 4.5], 0.5)
        out = cfm.sim_step(s, [P, P], cfm.SpeedProfile.constant(0.0))
        assert float(out.speeds[1]) == 0.0

    def test_collision_raised(self):
        s = cfm.SimState(np.array([10.0, 4.0]), np.array([0.0, 20.0]), [-1, 0], [4.5, 4.5], 0.1)
        with pytest.raises(CollisionState) as info:
            cfm.simulate(s, [P, P], 5, cfm.SpeedProfile.constant(0.0))
        assert info.value.vehicle == 1
        assert info.value.step == 0

    def test_matches_scalar_reference_over_100_steps(self):
        lead, fol = cfm.IdmParams(25.0, 1.2, 2.5, 1.8, 2.2), cfm.IdmParams(28.0, 1.6, 1.5, 1.2, 1.7)
        prof = cfm.SpeedProfile((0.0, 4.0, 8.0), (12.0, 4.0, 14.0))
        dt = 0.1
        xs, vs = cfm.simulate(cfm.SimState(np.array([30.0, 10.0]), np.array([12.0, 14.0]), [-1, 0], [4.5, 4.0], dt),
                              [lead, fol], 100, prof)
        x = [30.0, 10.0]
        v = [12.0, 14.0]
        for k in range(100):
            a = scalar_idm(v[1], x[0] - x[1] - 4.5, v[1] - v[0], fol)
            x = [x[0] + v[0] * dt, x[1] + v[1] * dt]
            v = [float(np.interp((k + 1) * dt, prof.times, prof.speeds)), max(0.0, v[1] + a * dt)]
            assert abs(xs[k + 1, 1] - x[1]) <= 1e-9 and abs(vs[k + 1, 1] - v[1]) <= 1e-9
            assert abs(xs[k + 1, 0] - x[0]) <= 1e-9

    def test_free_leader_without_profile(self):
        s = cfm.SimState(np.array([0.0]), np.array([10.0]), [-1], [4.5], 0.1)
        out = cfm.sim_step(s, [P])
        assert float(out.speeds[0]) == pytest.approx(10.0 + 0.1 * scalar_idm(10.0, 1e300, 0.0, P))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**20))
    def test_ordering_preserved(self, seed):
        rng = np.random.default_rng(seed)
        n = 4
        gaps = rng.uniform(3, 30, n - 1)
        pos = -np.concatenate([[0.0], np.cumsum(gaps + 4.5)])
        s = cfm.SimState(pos, rng.uniform(0, 20, n), [-1, 0, 1, 2], [4.5] * n, 0.1)
        params = [random_idm(rng) for _ in range(n)]
        prof = cfm.SpeedProfile((0.0, 3.0), tuple(rng.uniform(0, 20, 2)))
        try:
            xs, _ = cfm.simulate(s, params, 60, prof)
        except CollisionState:
            return
        assert np.all(np.diff(xs, axis=1) < 0)

    def test_gradient_through_step(self):
        def f(x1, v0_, v1, *theta):
            s = cfm.SimState(ad.stack([x1 * 0.0 + 20.0, x1]), ad.stack([v0_, v1]), [-1, 0], [4.5, 4.5], 0.1)
            out = cfm.sim_step(s, [P, cfm.IdmParams(*theta)])
            return ad.vsum(out.positions * out.speeds)

        rep = ad.finite_diff_check(f, [3.0, 11.0, 13.0, 28.0, 1.4, 2.2, 1.3, 1.9])
        assert rep.passed, rep.failures()


class TestEstimate:
    def test_round_trip(self):
        true = random_idm(np.random.default_rng(0))
        fol, lead = platoon_histories(true)
        est = cfm.estimate_params(fol, lead)
        np.testing.assert_allclose(est.as_array(), true.as_array(), rtol=0.05)

    def test_lane_gap_on_curve(self):
        true = random_idm(np.random.default_rng(1))
        fol, lead = platoon_histories(true, kappa=0.02)
        flat_f, flat_l = platoon_histories(true, kappa=0.0)
        np.testing.assert_allclose(cfm.lane_gap(fol, lead), cfm.lane_gap(flat_f, flat_l), atol=1e-9)

    def test_stationary_queue(self):
        jam = 2.7
        states_l = np.tile([10.0, 0.0, 0.0, 0.0], (20, 1))
        states_f = np.tile([10.0 - 4.5 - jam, 0.0, 0.0, 0.0], (20, 1))
        fol, lead = Trajectory(1, states_f, 0.1, 4.5, 0), Trajectory(0, states_l, 0.1)
        init = cfm.IdmParams(s0=jam)
        res = cfm.estimate_params(fol, lead, init, return_result=True)
        assert res.loss == 0.0
        assert res.params == init.projected()

    def test_noisy_history(self):
        true = random_idm(np.random.default_rng(2))
        fol, lead = platoon_histories(true, noise=0.05, seed=3)
        v, gap, dv, acc = cfm._fit_arrays(fol, lead)
        floor = float(cfm.fit_loss(true, v, gap, dv, acc))
        res = cfm.estimate_params(fol, lead, return_result=True)
        assert floor > 0
        assert res.loss <= 2 * floor

    def test_invalid_history(self):
        s = np.tile([0.0, 0.0, 0.0, 1.0], (5, 1))
        with pytest.raises(InvalidHistory):
            cfm.estimate_params(Trajectory(1, s, 0.1), Trajectory(0, s, 0.1))
        with pytest.raises(InvalidHistory):
            cfm.estimate_params(Trajectory(1, s[:2], 0.1), Trajectory(0, s[:2] + [10, 0, 0, 0], 0.1))
        with pytest.raises(InvalidHistory):
            cfm.estimate_params(Trajectory(1, s[:3], 0.1), Trajectory(0, s + [10, 0, 0, 0], 0.1))

    def test_fit_loss_gradient(self):
        fol, lead = platoon_histories(cfm.IdmParams(), steps=40)
        v, gap, dv, acc = cfm._fit_arrays(fol, lead)

        def f(*theta):
            return cfm.fit_loss(cfm.IdmParams(*theta), v, gap, dv, acc)

        rep = ad.finite_diff_check(f, [25.0, 1.2, 2.5, 1.8, 2.2])
        assert rep.passed, rep.failures()

    def test_observed_accel(self):
        np.testing.assert_allclose(cfm.observed_accel([0.0, 1.0, 4.0, 9.0], 1.0), [1.0, 2.0, 4.0, 5.0])


class TestAlpha:
    def test_identical(self):
        assert cfm.cosine_alpha(P, P) == pytest.approx(1.0)

    def test_scaled(self):
        assert cfm.cosine_alpha([2.0, 4.0, 6.0], [1.0, 2.0, 3.0]) == pytest.approx(1.0)

    def test_orthogonal_and_opposite(self):
        assert cfm.cosine_alpha([1.0, 0.0], [0.0, 1.0]) == 0.0
        assert cfm.cosine_alpha([1.0, 0.0], [-1.0, 0.2]) == 0.0

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            cfm.cosine_alpha([0.0, 0.0], [1.0, 2.0])

    @settings(max_examples=60, deadline=None)
    @given(u=st.lists(st.floats(0.1, 10), min_size=5, max_size=5), w=st.lists(st.floats(0.1, 10), min_size=5,
                                                                            max_size=5), c=st.floats(0.01, 100))
    def test_scale_invariant(self, u, w, c):
        assert cfm.cosine_alpha([c * a for a in u], w) == pytest.approx(cfm.cosine_alpha(u, w), rel=1e-12)

    def test_nominal_scale(self):
        a = cfm.cosine_alpha(P, cfm.IdmParams(v0=30.0, T_headway=0.5), scale=cfm.NOMINAL_SCALE)
        b = cfm.cosine_alpha(P, cfm.IdmParams(v0=30.0, T_headway=0.5))
        assert a < b < 1.0


class TestBlend:
    NET = Gaussian2D(1.0, -1.0, 0.8, 1.3, 0.4)

    def test_alpha_one(self):
        mix = cfm.blend_distributions(self.NET, (5.0, 5.0), 1.0)
        pts = (np.linspace(-3, 3, 7), np.linspace(-2, 4, 7))
        np.testing.assert_array_equal(mixture_density(mix, pts), mixture_density([mix[0]], pts))

    def test_alpha_zero(self):
        mix = cfm.blend_distributions(self.NET, (5.0, 5.0), 0.0)
        sim = Gaussian2D(5.0, 5.0, 0.8, 1.3, 0.4)
        from kinprior.core import gaussian2d_density

        assert mixture_density(mix, (4.0, 6.0)) == pytest.approx(gaussian2d_density(sim, (4.0, 6.0)), rel=1e-15)

    def test_half_mean(self):
        mix = cfm.blend_distributions(Gaussian2D(0.0, 0.0, 1, 1), (2.0, 0.0), 0.5)
        mean = sum(c.prob * np.array([c.pos.mu_x, c.pos.mu_y]) for c in mix)
        np.testing.assert_allclose(mean, [1.0, 0.0])

    def test_integrates_to_one(self):
        mix = cfm.blend_distributions(self.NET, (3.0, -2.0), 0.3)
        from test_core import grid_mass

        assert grid_mass(mix) == pytest.approx(1.0, abs=1e-3)

    def test_invalid_alpha(self):
        with pytest.raises(InvalidAlpha):
            cfm.blend_distributions(self.NET, (0, 0), 1.2)

    def test_hand_off_gradient(self):
        # at alpha = 1 the simulator point receives no gradient through the blended NLL
        def f(px, py, a):
            mix = cfm.blend_distributions(self.NET, (px, py), ad.clamp(a, 0.0, 1.0))
            return -ad.log(mixture_density(mix, (1.5, -0.5)))

        gx, gy, _ = ad.grad(f, [3.0, 2.0, 1.0])
        assert math.hypot(gx, gy) < 1e-8


class TestLossTerm:
    def test_examples(self):
        assert cfm.cfm_loss_term(1.0, 0.7) == 0.0
        assert cfm.cfm_loss_term(0.0, 0.1) == 0.1
        assert cfm.cfm_loss_term(0.4, 0.0) == 0.0
        assert cfm.cfm_loss_term(0.4, 0.5, printed=True) == 0.2

    def test_config(self):
        with pytest.raises(ValueError):
            cfm.BlendConfig(gamma=-1.0)
        with pytest.raises(ValueError):
            cfm.BlendConfig(alpha_mapping="softmax")


class TestPlatoonFile:
    def test_round_trip(self, tmp_path):
        st_ = cfm.SimState(np.array([30.0, 10.0]), np.array([12.0, 11.0]), [-1, 0], [4.5, 4.0], 0.1)
        pl = cfm.Platoon(st_, [P, cfm.IdmParams(v0=25.0)], 50, cfm.SpeedProfile((0.0, 2.0), (12.0, 8.0)), ["a", "b"])
        path = tmp_path / "p.json"
        cfm.save_platoon(path, pl)
        back = cfm.load_platoon(path)
        assert back.ids == ["a", "b"]
        assert back.state.leaders == (-1, 0)
        assert back.params[1].v0 == 25.0
        assert back.lead_profile == pl.lead_profile
        np.testing.assert_array_equal(back.state.positions, st_.positions)

    def test_errors(self, tmp_path):
        with pytest.raises(DataError):
            cfm.load_platoon(tmp_path / "nope.json")
        bad = tmp_path / "bad.json"
        bad.write_text('{"dt": 0.1, "steps": 3, "vehicles": [{"id": 1}]}')
        with pytest.raises(DataError):
            cfm.load_platoon(bad)
