"""Demonstration sets, censoring, window extraction, folds, serialization."""

import numpy as np
import pytest

from ivil.demos import (DemonstrationSet, EmptyWindowsError, WindowLayout,
                        extract_windows, generate_demonstrations,
                        kfold_partition, load_jsonl, save_jsonl)
from ivil.envs import CensorshipError, EnvSpec, InvalidConfigError, Trajectory


def _toy_demos(T=10, n_traj=1, env="plane_ticket", k=1):
    # Distinct recognizable values so window contents can be checked by eye:
    # s_t = t, a_t = 100 + t  (1-indexed).
    spec = EnvSpec(env=env, k=k, T=T)
    trajectories = []
    for j in range(n_traj):
        t = np.arange(1, T + 1, dtype=np.float64) + 1000.0 * j
        trajectories.append(Trajectory(
            s=t[:, None], a=(100.0 + t)[:, None], uo=np.zeros(T),
            ueps=np.zeros(T), r=np.zeros(T), episode_seed=j))
    return DemonstrationSet(trajectories=trajectories, env_spec=spec)


class TestGeneration:
    def test_paper_scale_counts(self):
        spec = EnvSpec(env="plane_ticket", k=1, T=500)
        demos = generate_demonstrations(spec, n_traj=40, seed=0)
        assert demos.n_steps == 20_000

    def test_desk_scale_counts(self):
        spec = EnvSpec(env="plane_ticket", k=1, T=200)
        demos = generate_demonstrations(spec, n_traj=20, seed=0)
        assert demos.n_steps == 4_000

    def test_deterministic_in_seed(self):
        spec = EnvSpec.make("linear_gaussian", k=2, T=50)
        a = generate_demonstrations(spec, n_traj=3, seed=9)
        b = generate_demonstrations(spec, n_traj=3, seed=9)
        for ta, tb in zip(a.trajectories, b.trajectories):
            assert np.array_equal(ta.s, tb.s) and np.array_equal(ta.a, tb.a)


class TestCensorship:
    def test_hidden_fields_raise(self):
        demos = _toy_demos().censor()
        tr = demos.trajectories[0]
        assert tr.s.shape == (10, 1)
        for name in ("uo", "ueps", "r"):
            with pytest.raises(CensorshipError):
                getattr(tr, name)

    def test_censor_idempotent(self):
        demos = _toy_demos().censor()
        assert demos.censor() is demos

    def test_windows_from_censored_have_no_uo(self):
        ws = extract_windows(_toy_demos().censor(), k=1, L=3)
        assert ws.uo is None
        ws_full = extract_windows(_toy_demos(), k=1, L=3)
        assert ws_full.uo is not None


class TestWindows:
    def test_hand_enumeration_k1_L2(self):
        demos = _toy_demos(T=3).censor()
        ws = extract_windows(demos, k=1, L=2)
        # Windows exist at t = 2 and t = 3; look-back of two states with the
        # action between them, instrument = the prefix ending at s_{t-1}.
        assert len(ws) == 2
        assert np.array_equal(ws.regressor[1], [2.0, 102.0, 3.0])
        assert np.array_equal(ws.instrument[1], [2.0])
        assert np.array_equal(ws.target[1], [103.0])
        assert ws.t.tolist() == [2, 3]

    def test_window_count_formula(self):
        # One window per t in [L, T]: count T - L + 1, checked by enumeration.
        demos = _toy_demos(T=10).censor()
        for k, L in [(1, 4), (2, 5), (3, 4)]:
            ws = extract_windows(demos, k=k, L=L)
            assert len(ws) == 10 - L + 1
            # Exhaustive check of every window's content.
            for i in range(len(ws)):
                t = int(ws.t[i])
                states = np.arange(t - L + 1, t + 1, dtype=np.float64)
                actions = states[:-1] + 100.0
                expect = np.empty(2 * L - 1)
                expect[0::2] = states
                expect[1::2] = actions
                assert np.array_equal(ws.regressor[i], expect)
                assert np.array_equal(ws.instrument[i], expect[:ws.layout.z_dim])
                assert ws.target[i, 0] == 100.0 + t

    def test_paper_lookback_count(self):
        spec = EnvSpec(env="plane_ticket", k=1, T=500)
        demos = generate_demonstrations(spec, n_traj=1, seed=0).censor()
        ws = extract_windows(demos, k=1, L=4)  # default look-back k + 3
        assert len(ws) == 500 - 4 + 1

    def test_minimum_length_boundary(self):
        k = 3
        demos = _toy_demos(T=k + 2, k=k).censor()
        ws = extract_windows(demos, k=k, L=k + 2)
        assert len(ws) == 1

    def test_shape_identity(self):
        layout = WindowLayout(ds=1, da=1, L=7, k=3)
        assert layout.x_dim - layout.z_dim == 3 * (1 + 1)
        assert layout.m_dim == 3 * 2 + 1

    def test_instrument_is_prefix(self):
        ws = extract_windows(_toy_demos(T=12).censor(), k=2, L=5)
        assert np.array_equal(ws.instrument, ws.regressor[:, :ws.layout.z_dim])

    def test_reconstruction(self):
        # Reconstructing (s_t, a_t) pairs from windows reproduces the source.
        demos = _toy_demos(T=9)
        tr = demos.trajectories[0]
        ws = extract_windows(demos.censor(), k=1, L=3)
        first = ws.regressor[0]
        s_rec = list(first[0::2])
        a_rec = list(first[1::2]) + [float(ws.target[0, 0])]
        for i in range(1, len(ws)):
            s_rec.append(float(ws.regressor[i, ws.layout.s_t_slice][0]))
            a_rec.append(float(ws.target[i, 0]))
        assert np.array_equal(np.asarray(s_rec), tr.s[:, 0])
        assert np.array_equal(np.asarray(a_rec), tr.a[:, 0])

    def test_lookback_validation(self):
        demos = _toy_demos(T=10).censor()
        with pytest.raises(InvalidConfigError):
            extract_windows(demos, k=3, L=3)   # needs L >= k + 1
        with pytest.raises(EmptyWindowsError):
            extract_windows(demos, k=1, L=11)  # longer than the trajectory


class TestKfold:
    def test_forty_into_five(self):
        folds = kfold_partition(40, K=5, seed=1)
        assert [len(f) for f in folds] == [8] * 5

    def test_single_fold_is_everything(self):
        folds = kfold_partition(7, K=1, seed=0)
        assert np.array_equal(folds[0], np.arange(7))

    def test_partition_laws(self):
        folds = kfold_partition(11, K=3, seed=5)
        sizes = sorted(len(f) for f in folds)
        assert max(sizes) - min(sizes) <= 1
        union = np.sort(np.concatenate(folds))
        assert np.array_equal(union, np.arange(11))

    def test_deterministic(self):
        a = kfold_partition(20, K=4, seed=3)
        b = kfold_partition(20, K=4, seed=3)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_too_many_folds_rejected(self):
        with pytest.raises(InvalidConfigError):
            kfold_partition(3, K=4, seed=0)

    def test_accepts_demo_set(self):
        demos = _toy_demos(n_traj=6)
        folds = kfold_partition(demos, K=2, seed=0)
        assert sum(len(f) for f in folds) == 6


class TestSerialization:
    def test_full_round_trip(self, tmp_path):
        spec = EnvSpec.make("linear_gaussian", k=2, T=20)
        demos = generate_demonstrations(spec, n_traj=3, seed=4)
        path = tmp_path / "demos.jsonl"
        save_jsonl(path, demos)
        back = load_jsonl(path)
        assert back.env_spec == spec and not back.censored
        for ta, tb in zip(demos.trajectories, back.trajectories):
            assert np.array_equal(ta.s, tb.s)
            assert np.array_equal(ta.a, tb.a)
            assert np.array_equal(ta.uo, tb.uo)
            assert np.array_equal(ta.r, tb.r)

    def test_censored_export_omits_hidden_fields(self, tmp_path):
        demos = _toy_demos(T=5).censor()
        path = tmp_path / "censored.jsonl"
        save_jsonl(path, demos)
        text = path.read_text()
        assert '"uo"' not in text and '"ueps"' not in text and '"r"' not in text
        back = load_jsonl(path)
        assert back.censored
        with pytest.raises(CensorshipError):
            back.trajectories[0].r
