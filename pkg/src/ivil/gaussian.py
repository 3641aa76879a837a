"""Closed-form conditioning oracles for the linear-Gaussian environment.

Under the expert, every recorded quantity in that environment is a fixed
linear combination of independent zero-mean Gaussians: the per-episode
signal ``uo``, the per-draw buffer noise ``q_j``, and the process noise
``w_t``.  This module propagates those coefficient vectors through the
dynamics exactly, so conditional expectations given any observed window
are plain linear-Gaussian formulas:

    E[target | window = x] = b' x,   b = (R D R')^{-1} R D c

where ``R`` stacks the window coordinates' coefficient rows, ``c`` is the
target's row, and ``D`` holds the basis variances.  The conditionals are
computed per window time ``t``; the environment mixes geometrically
(|gamma + alpha| < 1), so they coincide for all but the first few steps.

These oracles are the paper-trail for the learned models: the ideal
history policy, the biased sequence regression, and the best state-only
predictor all come out in closed form, as do the posterior variances that
feed the total-variation gap diagnostic.
"""

from __future__ import annotations

import math

import numpy as np

from .demos import WindowLayout
from .envs import EnvSpec, InvalidConfigError


def gaussian_cdf(x):
    """Standard normal CDF via erf (vectorized)."""
    x = np.asarray(x, dtype=np.float64)
    e = np.asarray(_ERF(x / math.sqrt(2.0)), dtype=np.float64)
    return 0.5 * (1.0 + e)


_ERF = np.frompyfunc(math.erf, 1, 1)


def tv_zero_mean_gaussians(sigma1: float, sigma2: float) -> float:
    """Total variation distance between N(0, s1^2) and N(0, s2^2).

    The densities cross at +-x*; integrating the narrower minus the wider
    density over |x| < x* gives the closed form below.  A zero-variance
    side degenerates to a point mass, at distance 1 from any continuous law.
    """
    lo, hi = sorted((abs(float(sigma1)), abs(float(sigma2))))
    if hi == 0.0:
        return 0.0
    if lo == 0.0:
        return 1.0
    if lo == hi:
        return 0.0
    x_star = lo * hi * math.sqrt(2.0 * math.log(hi / lo) / (hi * hi - lo * lo))
    return float(2.0 * (gaussian_cdf(x_star / lo) - gaussian_cdf(x_star / hi)))


class LinearGaussianSystem:
    """Exact second-order model of expert rollouts in the linear-Gaussian env.

    Basis order: ``[uo, q_{2-k}, ..., q_T, w_1, ..., w_T]`` where
    ``q_{2-k}..q_0`` are the surviving init-buffer draws and ``q_t`` is the
    fresh draw pushed at step ``t``.
    """

    def __init__(self, spec: EnvSpec):
        if spec.env != "linear_gaussian":
            raise InvalidConfigError("oracle conditioning needs the linear_gaussian env")
        self.spec = spec
        p = spec.params
        T, k = spec.T, spec.k
        self.T, self.k = T, k
        nb = 1 + (T + k - 1) + T
        self.n_basis = nb

        var = np.empty(nb)
        var[0] = p["sigma_o"] ** 2
        var[1:T + k] = spec.ueps_draw_std ** 2
        var[T + k:] = p["sigma_w"] ** 2
        self.basis_var = var

        # q_j lives at basis index j + k - 1 (j = 2-k ... T);
        # w_t lives at basis index (T + k - 1) + t.
        def q_idx(j):
            return j + k - 1

        def w_idx(t):
            return T + k - 1 + t

        alpha, beta, gamma = p["alpha"], p["beta"], p["gamma"]
        c_s, c_a = p["c_s"], spec.noise_scale

        ue = np.zeros((T + 1, nb))
        s = np.zeros((T + 1, nb))
        a = np.zeros((T + 1, nb))
        z_prev = np.zeros(nb)
        a_prev = np.zeros(nb)
        for t in range(1, T + 1):
            for j in range(t - k + 1, t + 1):
                ue[t, q_idx(j)] = 1.0 / k
            z = gamma * z_prev + a_prev
            z[w_idx(t)] += 1.0
            s[t] = z + c_s * ue[t]
            a[t] = alpha * s[t] + c_a * ue[t]
            a[t, 0] += beta
            z_prev, a_prev = z, a[t]
        self.ueps_rows, self.s_rows, self.a_rows = ue, s, a
        self._cache: dict = {}

    # -- window geometry ------------------------------------------------

    def window_rows(self, t: int, L: int) -> np.ndarray:
        """Coefficient rows of the interleaved window ending at s_t."""
        layout = WindowLayout(ds=1, da=1, L=L, k=1)
        R = np.empty((layout.x_dim, self.n_basis))
        for i in range(L):
            step = t - L + 1 + i
            R[layout.state_slot(i).start] = self.s_rows[step]
            if i < L - 1:
                R[layout.action_slot(i).start] = self.a_rows[step]
        return R

    def _condition(self, t: int, L: int, target_row: np.ndarray):
        R = self.window_rows(t, L)
        Rd = R * self.basis_var
        G = Rd @ R.T
        v = Rd @ target_row
        b = np.linalg.solve(G, v)
        pred_var = float(b @ v)
        target_var = float(target_row @ (self.basis_var * target_row))
        return b, pred_var, max(target_var - pred_var, 0.0)

    def _cond_cached(self, t: int, L: int, kind: str):
        key = (t, L, kind)
        if key not in self._cache:
            if kind == "uo":
                row = self._uo_row
            elif kind == "ueps":
                row = self.ueps_rows[t]
            else:
                raise ValueError(f"unknown conditioning target {kind!r}")
            self._cache[key] = self._condition(t, L, row)
        return self._cache[key]

    @property
    def _uo_row(self) -> np.ndarray:
        row = np.zeros(self.n_basis)
        row[0] = 1.0
        return row

    def uo_posterior(self, t: int, L: int):
        """(coef, predictor variance, residual variance) of E[uo | window at t]."""
        return self._cond_cached(t, L, "uo")

    def ueps_posterior(self, t: int, L: int):
        return self._cond_cached(t, L, "ueps")

    # -- pooled second moments -------------------------------------------

    def var(self, rows: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(rows)
        return np.einsum("ij,j,ij->i", rows, self.basis_var, rows)

    def cov(self, row_a: np.ndarray, row_b: np.ndarray) -> float:
        return float(row_a @ (self.basis_var * row_b))

    # -- oracle predictors -------------------------------------------------

    def predict_conditional(self, X: np.ndarray, ts: np.ndarray, L: int,
                            kind: str) -> np.ndarray:
        """E[uo | x_t] or E[ueps_t | x_t] evaluated at raw windows."""
        X = np.atleast_2d(X)
        ts = np.asarray(ts)
        out = np.empty(X.shape[0])
        for t in np.unique(ts):
            b, _, _ = self._cond_cached(int(t), L, kind)
            mask = ts == t
            out[mask] = X[mask] @ b
        return out

    def history_policy(self, X: np.ndarray, ts: np.ndarray, L: int) -> np.ndarray:
        """The ideal history policy: alpha * s_t + beta * E[uo | window]."""
        p = self.spec.params
        s_t = np.atleast_2d(X)[:, -1]
        return (p["alpha"] * s_t
                + p["beta"] * self.predict_conditional(X, ts, L, "uo"))[:, None]

    def bcseq_predictor(self, X: np.ndarray, ts: np.ndarray, L: int) -> np.ndarray:
        """What plain sequence regression converges to:
        the history policy plus the confounding bias c_a * E[ueps_t | window]."""
        bias = self.spec.noise_scale * self.predict_conditional(X, ts, L, "ueps")
        return self.history_policy(X, ts, L) + bias[:, None]

    def bias_std(self, ts, L: int) -> float:
        """Pooled std of the sequence-regression bias term c_a * E[ueps_t | h_t]."""
        pv = [self.ueps_posterior(int(t), L)[1] for t in np.unique(np.asarray(ts))]
        return float(abs(self.spec.noise_scale) * math.sqrt(float(np.mean(pv))))

    def state_only_coef(self, t: int) -> float:
        """Best linear predictor of the expert from s_t alone:
        alpha + beta * Cov(uo, s_t) / Var(s_t)."""
        p = self.spec.params
        s_row = self.s_rows[t]
        return p["alpha"] + p["beta"] * self.cov(self._uo_row, s_row) / float(self.var(s_row)[0])

    def bc_coef(self, t: int) -> float:
        """Population regression coefficient of a_t on s_t (the biased map BC fits)."""
        s_row, a_row = self.s_rows[t], self.a_rows[t]
        return self.cov(a_row, s_row) / float(self.var(s_row)[0])

    def state_only_predictor(self, S: np.ndarray, ts: np.ndarray) -> np.ndarray:
        S = np.asarray(S).reshape(-1)
        out = np.empty(S.shape[0])
        ts = np.asarray(ts)
        for t in np.unique(ts):
            out[ts == t] = self.state_only_coef(int(t)) * S[ts == t]
        return out[:, None]

    def bc_predictor(self, S: np.ndarray, ts: np.ndarray) -> np.ndarray:
        S = np.asarray(S).reshape(-1)
        out = np.empty(S.shape[0])
        ts = np.asarray(ts)
        for t in np.unique(ts):
            out[ts == t] = self.bc_coef(int(t)) * S[ts == t]
        return out[:, None]

    # -- gap diagnostic ingredients ---------------------------------------

    def delta_hat(self, ts, L: int) -> float:
        """Worst-case TV distance between the law of uo and the law of its
        window predictor, over the supplied window times.

        Read of the theorem's TV term: both laws are zero-mean Gaussians
        here (marginal uo vs. the linear predictor E[uo | h_t] under expert
        trajectories), so the distance is closed-form per t.  Labeled as an
        interpretation in the diagnostics output.
        """
        sigma_o = self.spec.params["sigma_o"]
        worst = 0.0
        for t in np.unique(np.asarray(ts)):
            _, pred_var, _ = self.uo_posterior(int(t), L)
            worst = max(worst, tv_zero_mean_gaussians(math.sqrt(max(pred_var, 0.0)),
                                                      sigma_o))
        return worst
