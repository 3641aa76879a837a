"""Reference imitators: plain regression (bc), history regression (bc_seq),
and an instrumented state-only policy (iv_residual).

``bc`` regresses actions on states and inherits the full confounding bias.
``bc_seq`` regresses on history windows: it can infer the expert-observable
signal but still absorbs the conditional mean of the confounding noise.
``iv_residual`` reuses the two-stage machinery of :mod:`ivil.cmr` but
restricts the policy to the current state, so it removes the noise bias
while remaining blind to whatever the history says about the
expert-observable signal.  It stands in for history-instrumented
residual-minimization baselines adapted to horizons k > 1.

All three use a deterministic squared-error head: for a fixed-variance
Gaussian likelihood the minimizer is the same, and a shared head keeps the
action-error comparison across methods fair.
"""

from __future__ import annotations

import numpy as np

from .approx import Mlp, Standardizer, TrainConfig, fit_regressor
from .cmr import (StatePolicy, _fit_policy_on_folds, derive_rngs,
                  fit_rollout_model)
from .demos import DemonstrationSet, extract_windows, kfold_partition
from .envs import InvalidConfigError


def train_bc(demos: DemonstrationSet, cfg: TrainConfig, rng) -> StatePolicy:
    """Supervised regression of the recorded action on the current state."""
    demos = demos.censor()
    S = np.concatenate([np.asarray(tr.s) for tr in demos.trajectories])
    A = np.concatenate([np.asarray(tr.a) for tr in demos.trajectories])
    init_rng, train_rng = derive_rngs(rng, 2)
    s_scaler = Standardizer.fit(S)
    y_scaler = Standardizer.fit(A)
    mlp = Mlp(S.shape[1], cfg.hidden, A.shape[1], init_rng)
    fit_regressor(mlp, s_scaler.transform(S), y_scaler.transform(A), cfg, train_rng)
    return StatePolicy(mlp=mlp, s_scaler=s_scaler, y_scaler=y_scaler,
                       trained_with="bc")


def train_bc_seq(demos: DemonstrationSet, L: int, cfg: TrainConfig, rng):
    """Supervised regression of the action on the look-back window."""
    from .cmr import HistoryPolicy

    demos = demos.censor()
    windows = extract_windows(demos, k=1, L=L)  # instrument unused here
    init_rng, train_rng = derive_rngs(rng, 2)
    x_scaler = Standardizer.fit(windows.regressor)
    y_scaler = Standardizer.fit(windows.target)
    mlp = Mlp(windows.layout.x_dim, cfg.hidden, windows.layout.da, init_rng)
    fit_regressor(mlp, x_scaler.transform(windows.regressor),
                  y_scaler.transform(windows.target), cfg, train_rng)
    return HistoryPolicy(mlp=mlp, layout=windows.layout, x_scaler=x_scaler,
                         y_scaler=y_scaler, trained_with="bc_seq")


def train_iv_residual(demos: DemonstrationSet, k: int, K: int,
                      cfg: TrainConfig, rng, L: int | None = None) -> StatePolicy:
    """Two-stage instrumented training of a state-only policy.

    Stage 1 is identical to the history method; stage 2 regresses the
    generated action on the generated current state alone.
    """
    demos = demos.censor()
    L = L if L is not None else k + 3
    windows = extract_windows(demos, k=k, L=L)
    n_traj = len(demos)
    if K < 1 or K > n_traj:
        raise InvalidConfigError(f"need 1 <= K <= {n_traj} folds, got {K}")

    if K == 1:
        rollout_rng, stage2_rng = derive_rngs(rng, 2)
        pairs = [(fit_rollout_model(windows, k, cfg, rollout_rng),
                  windows.instrument)]
    else:
        seeds = derive_rngs(rng, K + 2)
        part_rng, stage2_rng, model_rngs = seeds[0], seeds[1], seeds[2:]
        folds = kfold_partition(n_traj, K, part_rng)
        all_ids = np.arange(n_traj)
        pairs = []
        for i, fold in enumerate(folds):
            complement = np.setdiff1d(all_ids, fold)
            model = fit_rollout_model(windows.for_trajectories(complement), k,
                                      cfg, model_rngs[i])
            pairs.append((model, windows.for_trajectories(fold).instrument))

    layout = windows.layout
    s_scaler = Standardizer.fit(windows.regressor[:, layout.s_t_slice])
    y_scaler = Standardizer.fit(windows.target)
    policy = _fit_policy_on_folds(pairs, layout, s_scaler, y_scaler, cfg,
                                  stage2_rng, trained_with="iv_residual",
                                  in_slice=layout.s_t_slice)
    return policy
