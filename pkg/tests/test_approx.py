"""Unit tests for the hand-rolled approximators and optimizer."""

import math

import numpy as np
import pytest

from ivil.approx import (AdamW, MixtureDensity, Mlp, NumericalError,
                         Standardizer, TrainConfig, fit_density,
                         fit_regressor, load_checkpoint,
                         max_relative_error, save_checkpoint)


def _rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


def _fd_grads(loss_fn, params, h=1e-5):
    # Local finite-difference oracle, independent of the library path.
    out = []
    for p in params:
        g = np.zeros_like(p)
        fp, fg = p.ravel(), g.ravel()
        for i in range(fp.size):
            orig = fp[i]
            fp[i] = orig + h
            up = loss_fn()
            fp[i] = orig - h
            dn = loss_fn()
            fp[i] = orig
            fg[i] = (up - dn) / (2 * h)
        out.append(g)
    return out


class TestMlpForward:
    def test_zero_params_zero_output(self):
        mlp = Mlp(3, 4, 2, rng=_rng())
        mlp.set_params([np.zeros_like(p) for p in mlp.params])
        X = _rng(1).standard_normal((5, 3))
        assert np.all(mlp.forward(X) == 0.0)

    def test_identity_path_passes_positive_input(self):
        mlp = Mlp(1, 1, 1, rng=_rng())
        mlp.set_params([np.ones((1, 1)), np.zeros(1), np.ones((1, 1)),
                        np.zeros(1), np.ones((1, 1)), np.zeros(1)])
        x = np.array([[0.7], [2.5]])
        assert np.allclose(mlp.forward(x), x)

    def test_matches_straight_line_reimplementation(self):
        mlp = Mlp(4, 6, 3, rng=_rng(7))
        X = _rng(8).standard_normal((10, 4))
        got = mlp.forward(X)

        # Second, independently written affine/rectifier chain.
        ref = np.empty((10, 3))
        for i in range(10):
            v = X[i]
            v = np.array([max(z, 0.0) for z in (mlp.W1.T @ v + mlp.b1)])
            v = np.array([max(z, 0.0) for z in (mlp.W2.T @ v + mlp.b2)])
            ref[i] = mlp.W3.T @ v + mlp.b3
        assert np.max(np.abs(got - ref)) < 1e-12 * max(1.0, np.max(np.abs(ref)))

    def test_shape_mismatch_raises(self):
        mlp = Mlp(3, 4, 2, rng=_rng())
        with pytest.raises(ValueError):
            mlp.forward(np.zeros((2, 5)))


class TestMlpGradient:
    def test_zero_at_perfect_fit(self):
        mlp = Mlp(3, 5, 2, rng=_rng(3))
        X = _rng(4).standard_normal((6, 3))
        Y = mlp.forward(X)
        _, grads = mlp.loss_and_grad(X, Y)
        assert all(np.max(np.abs(g)) < 1e-14 for g in grads)

    def test_mean_squared_convention(self):
        # Batch of one, scalar output: loss is (y - f(x))^2 and dL/d(bias)
        # is -2 * (y - f(x)); with y=2, f(x)=0 that derivative is -4.
        mlp = Mlp(1, 1, 1, rng=_rng())
        mlp.set_params([np.zeros((1, 1)), np.zeros(1), np.zeros((1, 1)),
                        np.zeros(1), np.zeros((1, 1)), np.zeros(1)])
        loss, grads = mlp.loss_and_grad(np.array([[1.0]]), np.array([[2.0]]))
        assert loss == 4.0
        assert grads[5][0] == -4.0

    def test_matches_finite_differences(self):
        mlp = Mlp(3, 5, 2, rng=_rng(11))
        X = _rng(12).standard_normal((8, 3))
        Y = _rng(13).standard_normal((8, 2))
        _, grads = mlp.loss_and_grad(X, Y)
        fd = _fd_grads(lambda: mlp.loss_and_grad(X, Y)[0], mlp.params)
        assert max_relative_error(grads, fd) < 1e-5

    def test_non_finite_loss_reports_sample(self):
        mlp = Mlp(2, 3, 1, rng=_rng())
        X = np.array([[0.0, 1.0], [np.nan, 0.0]])
        with pytest.raises(NumericalError, match="sample index 1"):
            mlp.loss_and_grad(X, np.zeros((2, 1)))


class TestMixtureDensity:
    def _unit_gaussian_mdn(self, n_components=1, dim=1):
        mdn = MixtureDensity(2, 3, dim, n_components, rng=_rng(5))
        # Zero head weights/biases: mu = 0, logstd = 0 (sigma = 1), equal weights.
        params = mdn.params
        for p in params[4:]:
            p[...] = 0.0
        return mdn

    def test_standard_normal_loglik(self):
        mdn = self._unit_gaussian_mdn()
        ll = mdn.loglik(np.zeros((1, 2)), np.zeros((1, 1)))
        assert abs(ll[0] - (-0.5 * math.log(2 * math.pi))) < 1e-12

    def test_duplicate_components_collapse(self):
        one = self._unit_gaussian_mdn(n_components=1)
        five = self._unit_gaussian_mdn(n_components=5)
        X = _rng(6).standard_normal((4, 2))
        Y = _rng(7).standard_normal((4, 1))
        assert np.allclose(one.loglik(X, Y), five.loglik(X, Y), atol=1e-12)

    def test_density_integrates_to_one(self):
        mdn = MixtureDensity(2, 4, 1, 3, rng=_rng(9))
        x = _rng(10).standard_normal((1, 2))
        grid = np.linspace(-60.0, 60.0, 200001)
        ll = mdn.loglik(np.repeat(x, grid.size, axis=0), grid[:, None])
        mass = np.trapezoid(np.exp(ll), grid)
        assert abs(mass - 1.0) < 1e-3

    def test_gradient_matches_finite_differences(self):
        mdn = MixtureDensity(2, 4, 2, 3, rng=_rng(15))
        X = _rng(16).standard_normal((6, 2))
        Y = _rng(17).standard_normal((6, 2))
        _, grads = mdn.loss_and_grad(X, Y)
        fd = _fd_grads(lambda: mdn.loss_and_grad(X, Y)[0], mdn.params)
        assert max_relative_error(grads, fd) < 1e-5

    def test_sample_concentrates_when_std_floored(self):
        mdn = MixtureDensity(1, 3, 1, 2, rng=_rng(20))
        mdn.bs[...] = -30.0  # pushed below the clamp floor
        mdn.Ws[...] = 0.0
        X = np.zeros((2000, 1))
        samples = mdn.sample(X, _rng(21))
        means = mdn.conditional_mean(X[:1])
        # Components may differ in mean; samples sit within a few floored stds
        # of one of the component means.
        _, _, _, h2 = mdn._trunk(X[:1])
        _, mu, _, _ = mdn._heads(h2)
        dist = np.min(np.abs(samples[:, 0][:, None] - mu[0, :, 0][None, :]), axis=1)
        assert np.max(dist) < 5 * math.exp(-7.0)
        assert np.isfinite(means).all()

    def test_single_component_sample_mean(self):
        mdn = self._unit_gaussian_mdn(n_components=1)
        mdn.bm[...] = 1.5  # mu = 1.5, sigma = 1
        n = 100_000
        samples = mdn.sample(np.zeros((n, 1 + 1)), _rng(22))
        assert abs(samples.mean() - 1.5) < 4.0 / math.sqrt(n)

    def test_two_component_frequencies(self):
        mdn = MixtureDensity(1, 2, 1, 2, rng=_rng(23))
        for p in mdn.params:
            p[...] = 0.0
        mdn.bm[...] = np.array([1.0, -1.0])   # components at +-1
        mdn.bs[...] = math.log(0.01)
        n = 100_000
        samples = mdn.sample(np.zeros((n, 1)), _rng(24))
        frac = float(np.mean(samples[:, 0] > 0))
        # Binomial 4-sigma band around 0.5.
        assert abs(frac - 0.5) < 4 * math.sqrt(0.25 / n)


class TestAdamW:
    def test_zero_gradient_no_decay_keeps_params(self):
        p = [np.array([1.0, -2.0])]
        opt = AdamW(p, lr=0.1, weight_decay=0.0)
        opt.step(p, [np.zeros(2)])
        assert np.all(p[0] == np.array([1.0, -2.0]))

    def test_zero_gradient_decay_scales_params(self):
        p = [np.array([1.0, -2.0])]
        opt = AdamW(p, lr=0.1, weight_decay=0.01)
        opt.step(p, [np.zeros(2)])
        assert np.allclose(p[0], np.array([1.0, -2.0]) * (1 - 0.1 * 0.01))

    def test_quadratic_convergence(self):
        target = np.array([3.0, -1.0])
        p = [np.zeros(2)]
        opt = AdamW(p, lr=0.03, weight_decay=0.0)
        init = float(((p[0] - target) ** 2).sum())
        losses = []
        for _ in range(5000):
            g = 2 * (p[0] - target)
            opt.step(p, [g])
            losses.append(float(((p[0] - target) ** 2).sum()))
        assert losses[-1] < 1e-6 * init
        # Monotone after warmup at block granularity (Adam dithers near the
        # optimum at floating-point scale).
        blocks = np.array(losses[200:]).reshape(-1, 240).mean(axis=1)
        assert np.all(np.diff(blocks) <= 1e-12)

    def test_rejects_non_finite_gradient(self):
        p = [np.zeros(2)]
        opt = AdamW(p, lr=0.1)
        with pytest.raises(NumericalError, match="non-finite gradient"):
            opt.step(p, [np.array([np.inf, 0.0])])


class TestTraining:
    def test_deterministic_fit(self):
        X = _rng(30).standard_normal((200, 3))
        Y = X @ np.array([[1.0], [0.5], [-2.0]])
        cfg = TrainConfig(hidden=8, epochs=5, lr=1e-3, batch_size=32)

        def run():
            mlp = Mlp(3, 8, 1, rng=_rng(31))
            fit_regressor(mlp, X, Y, cfg, rng=_rng(32))
            return mlp

        a, b = run(), run()
        assert all(np.array_equal(pa, pb) for pa, pb in zip(a.params, b.params))

    def test_density_fit_improves(self):
        rng = _rng(33)
        X = rng.standard_normal((400, 2))
        Y = X @ np.array([[1.0], [-1.0]]) + 0.1 * rng.standard_normal((400, 1))
        mdn = MixtureDensity(2, 8, 1, 2, rng=_rng(34))
        cfg = TrainConfig(hidden=8, epochs=10, lr=3e-3, batch_size=64)
        trace = fit_density(mdn, X, Y, cfg, rng=_rng(35))
        assert trace[-1] < trace[0]


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        mlp = Mlp(3, 4, 2, rng=_rng(40))
        scalers = {"x": Standardizer.fit(_rng(41).standard_normal((10, 3)))}
        path = tmp_path / "model.json"
        save_checkpoint(path, mlp, scalers, meta={"method": "bc"})
        back, s2, meta = load_checkpoint(path)
        assert all(np.array_equal(a, b) for a, b in zip(mlp.params, back.params))
        assert np.array_equal(scalers["x"].mean, s2["x"].mean)
        assert meta["method"] == "bc"

    def test_mdn_round_trip(self, tmp_path):
        mdn = MixtureDensity(2, 3, 1, 4, rng=_rng(42))
        path = tmp_path / "mdn.json"
        save_checkpoint(path, mdn)
        back, _, _ = load_checkpoint(path)
        X = _rng(43).standard_normal((5, 2))
        Y = _rng(44).standard_normal((5, 1))
        assert np.array_equal(mdn.loglik(X, Y), back.loglik(X, Y))
