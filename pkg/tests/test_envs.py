"""Environment construction checks: noise buffers, structural equations,
expert behavior, determinism."""

import numpy as np
import pytest

from ivil.envs import (ConfounderState, DivergedEpisodeError, EnvSpec,
                       InvalidConfigError, MovingAverage, confounder_step,
                       expert_action, linear_gaussian_rollout, plane_noise,
                       plane_rollout, plane_ticket_step, random_policy,
                       rollout)


def _rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


class TestConfounderState:
    def test_zero_buffers_have_zero_means(self):
        state = ConfounderState(uo_buffer=MovingAverage(np.zeros(30)),
                                ueps_buffer=MovingAverage(np.zeros(4)),
                                M=30, k=4, ueps_draw_std=0.2)
        assert state.uo_buffer.mean == 0.0
        assert state.ueps_buffer.mean == 0.0

    def test_one_replacement_per_step(self):
        spec = EnvSpec(env="plane_ticket", k=3, M=5, T=10)
        state = ConfounderState.init(spec, _rng(1))
        before_uo = state.uo_buffer.values.copy()
        before_ue = state.ueps_buffer.values.copy()
        confounder_step(state, _rng(2))
        assert np.sum(state.uo_buffer.values != before_uo) == 1
        assert np.sum(state.ueps_buffer.values != before_ue) == 1

    def test_means_track_buffers(self):
        spec = EnvSpec(env="plane_ticket", k=2, M=3, T=10)
        state = ConfounderState.init(spec, _rng(3))
        rng = _rng(4)
        for _ in range(7):
            uo, ueps = confounder_step(state, rng)
            assert uo == pytest.approx(np.mean(state.uo_buffer.values), abs=0)
            assert ueps == pytest.approx(np.mean(state.ueps_buffer.values), abs=0)

    def test_k_below_one_rejected(self):
        with pytest.raises(InvalidConfigError):
            EnvSpec(env="plane_ticket", k=0, T=10)
        with pytest.raises(InvalidConfigError):
            EnvSpec(env="plane_ticket", k=1, M=0, T=10)

    def test_variance_flat_in_k(self):
        # Per-draw std 0.1*sqrt(k) keeps Var(ueps) at 0.01 for every k.
        for k in (1, 5, 20):
            spec = EnvSpec(env="plane_ticket", k=k, T=100_000)
            _, ueps = plane_noise(spec, seed=100 + k)
            var = float(np.var(ueps))
            assert abs(var - 0.01) < 0.05 * 0.01 * 3  # generous at 1e5 samples

    def test_k1_consecutive_independent_and_overlap_correlation(self):
        spec = EnvSpec(env="plane_ticket", k=1, T=200_000)
        _, ueps = plane_noise(spec, seed=9)
        lag1 = np.corrcoef(ueps[1:], ueps[:-1])[0, 1]
        assert abs(lag1) < 3.0 / np.sqrt(ueps.size)

        spec5 = EnvSpec(env="plane_ticket", k=5, T=200_000)
        _, ueps5 = plane_noise(spec5, seed=10)
        lag1 = np.corrcoef(ueps5[1:], ueps5[:-1])[0, 1]
        # Moving-average overlap gives corr (k-1)/k at lag 1 and 0 at lag k.
        assert abs(lag1 - 4 / 5) < 0.02
        lagk = np.corrcoef(ueps5[5:], ueps5[:-5])[0, 1]
        assert abs(lagk) < 3.0 / np.sqrt(ueps5.size)


class TestExpertAction:
    def test_plane_zero_state(self):
        spec = EnvSpec(env="plane_ticket", T=10)
        assert expert_action(0.0, 0.5, spec) == 0.0

    def test_plane_analytic(self):
        spec = EnvSpec(env="plane_ticket", T=10)
        assert expert_action(-0.3, 0.6, spec) == pytest.approx(0.5)

    def test_plane_clips(self):
        spec = EnvSpec(env="plane_ticket", T=10)
        assert expert_action(0.6, 0.3, spec) == -1.0

    def test_plane_zero_uo_raises(self):
        spec = EnvSpec(env="plane_ticket", T=10)
        with pytest.raises(ZeroDivisionError):
            expert_action(0.5, 0.0, spec)

    def test_linear_gaussian_analytic(self):
        spec = EnvSpec.make("linear_gaussian", T=10,
                            params={"alpha": 0.5, "beta": 1.0})
        assert expert_action(2.0, -1.0, spec) == pytest.approx(0.0)


class TestPlaneTicketStep:
    def test_zero_noise_fixed_point(self):
        class _ZeroRng(np.random.Generator):
            # Generator whose draws are exactly zero: keeps buffers at zero.
            def uniform(self, low=0.0, high=1.0, size=None):
                return 0.0

            def normal(self, loc=0.0, scale=1.0, size=None):
                return 0.0

        state = ConfounderState(uo_buffer=MovingAverage(np.zeros(30)),
                                ueps_buffer=MovingAverage(np.zeros(1)),
                                M=30, k=1, ueps_draw_std=0.0)
        rec = plane_ticket_step(s_prev=0.5, a_prev=0.0, conf=state,
                                rng=_ZeroRng(np.random.Philox(0)))
        assert rec.s == 0.0 and rec.a == 0.0 and rec.r == 0.0

    def test_clip_boundary_action_decomposition(self):
        spec = EnvSpec(env="plane_ticket", k=1, T=10)
        state = ConfounderState.init(spec, _rng(6))
        rec = plane_ticket_step(0.1, 0.0, state, _rng(7), spec=spec)
        expected = float(expert_action(rec.s, rec.uo, spec)) + 10.0 * rec.ueps
        assert rec.a == expected  # recomposition is bit-exact
        assert rec.r == -(rec.s + rec.uo * rec.a) ** 2

    def test_expert_optimal_under_reward(self):
        # With ueps == 0 and |s/uo| <= 1 the expert attains the reward maximum.
        rng = _rng(8)
        grid = np.linspace(-1, 1, 2001)
        for _ in range(50):
            uo = rng.uniform(-1, 1)
            if abs(uo) < 1e-3:
                continue
            s = rng.uniform(-abs(uo), abs(uo))
            spec = EnvSpec(env="plane_ticket", T=10)
            a_star = float(expert_action(s, uo, spec))
            r_star = -(s + uo * a_star) ** 2
            r_grid = -(s + uo * grid) ** 2
            assert r_star >= np.max(r_grid) - 1e-12
            assert abs(r_star) < 1e-20


class TestRollouts:
    def test_plane_deterministic(self):
        spec = EnvSpec(env="plane_ticket", k=2, T=50)
        a = plane_rollout(spec, "expert", seed=123)
        b = plane_rollout(spec, "expert", seed=123)
        assert np.array_equal(a.s, b.s) and np.array_equal(a.a, b.a)
        assert np.array_equal(a.r, b.r)

    def test_plane_structural_equation_exact(self):
        spec = EnvSpec(env="plane_ticket", k=3, T=200)
        tr = plane_rollout(spec, "expert", seed=77)
        from ivil.envs import _plane_expert
        recomposed = np.array([
            float(_plane_expert(tr.s[i, 0], tr.uo[i])) + spec.noise_scale * tr.ueps[i]
            for i in range(len(tr))])
        assert np.array_equal(recomposed, tr.a[:, 0])

    def test_plane_state_recursion(self):
        spec = EnvSpec(env="plane_ticket", k=2, T=100)
        tr = plane_rollout(spec, "expert", seed=5)
        signs = np.where(np.concatenate([[0.0], tr.s[:-1, 0]]) >= 0, 1.0, -1.0)
        assert np.allclose(tr.s[:, 0], signs * tr.uo - tr.ueps)

    def test_linear_gaussian_zero_noise_zero_trajectory(self):
        spec = EnvSpec.make("linear_gaussian", T=30, params={
            "sigma_o": 0.0, "sigma_eps": 0.0, "sigma_w": 0.0})
        tr = linear_gaussian_rollout(spec, "expert", seed=3)
        assert np.all(tr.s == 0.0) and np.all(tr.a == 0.0)
        assert np.all(tr.r == 1.0)  # reward peaks when the action matches the expert

    def test_linear_gaussian_eq2(self):
        spec = EnvSpec.make("linear_gaussian", T=100, k=2)
        tr = linear_gaussian_rollout(spec, "expert", seed=11)
        p = spec.params
        recomposed = (p["alpha"] * tr.s[:, 0] + p["beta"] * tr.uo
                      + spec.noise_scale * tr.ueps)
        assert np.array_equal(recomposed, tr.a[:, 0])

    def test_unconfounded_residual_uncorrelated(self):
        spec = EnvSpec.make("linear_gaussian", T=2000, params={"c_s": 0.0},
                            noise_scale=0.0)
        tr = linear_gaussian_rollout(spec, "expert", seed=21)
        p = spec.params
        resid = tr.a[:, 0] - p["alpha"] * tr.s[:, 0] - p["beta"] * tr.uo
        assert np.max(np.abs(resid)) < 1e-12  # no noise channel at all

        # With noise on the action only (c_s = 0) the residual is exogenous:
        # correlation with the state stays at sampling noise.
        spec2 = EnvSpec.make("linear_gaussian", T=100_000, params={"c_s": 0.0},
                             noise_scale=1.0)
        tr2 = linear_gaussian_rollout(spec2, "expert", seed=22)
        resid2 = tr2.a[:, 0] - p["alpha"] * tr2.s[:, 0] - p["beta"] * tr2.uo
        corr = np.corrcoef(resid2, tr2.s[:, 0])[0, 1]
        assert abs(corr) < 3.0 / np.sqrt(len(tr2))

    def test_confounding_channel_active(self):
        spec = EnvSpec.make("linear_gaussian", T=100_000, k=1)
        tr = linear_gaussian_rollout(spec, "expert", seed=23)
        p = spec.params
        resid = tr.a[:, 0] - p["alpha"] * tr.s[:, 0] - p["beta"] * tr.uo
        corr = np.corrcoef(resid, tr.s[:, 0])[0, 1]
        assert abs(corr) > 10.0 / np.sqrt(len(tr))

    def test_divergence_guard(self):
        spec = EnvSpec.make("linear_gaussian", T=300, params={"gamma": 1.6})
        with pytest.raises(DivergedEpisodeError):
            linear_gaussian_rollout(spec, lambda s: 2.0 * s, seed=2)


class TestRandomPolicy:
    def test_bounds(self):
        plane = EnvSpec(env="plane_ticket", T=10)
        lg = EnvSpec.make("linear_gaussian", T=10)
        rng = _rng(30)
        for _ in range(100):
            assert -1.0 <= random_policy(plane, rng) <= 1.0
            a = random_policy(lg, rng)
            assert lg.params["action_low"] <= a <= lg.params["action_high"]

    def test_empirical_mean_near_midpoint(self):
        plane = EnvSpec(env="plane_ticket", T=10)
        rng = _rng(31)
        draws = np.array([random_policy(plane, rng) for _ in range(100_000)])
        se = (2.0 / np.sqrt(12.0)) / np.sqrt(draws.size)
        assert abs(draws.mean()) < 4 * se

    def test_random_rollout_actions_in_bounds_before_noise(self):
        spec = EnvSpec(env="plane_ticket", k=1, T=50)
        tr = rollout(spec, "random", seed=4, noised=False)
        assert np.all(tr.a >= -1.0) and np.all(tr.a <= 1.0)


class TestEnvSpecJson:
    def test_round_trip(self):
        spec = EnvSpec.make("linear_gaussian", k=3, T=120)
        back = EnvSpec.from_json(spec.to_json())
        assert back == spec

    def test_defaults_plane(self):
        spec = EnvSpec.from_json({"env": "plane_ticket"})
        assert spec.M == 30 and spec.noise_scale == 10.0 and spec.T == 500
        assert spec.ueps_draw_std == pytest.approx(0.1)
