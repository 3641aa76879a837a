"""Two-stage conditional-moment solver and its diagnostics.

The training target is a history policy ``pi(h_t)`` satisfying the
instrumented moment condition ``E[a_t - pi(h_t) | h_{t-k}] = 0``: the
lagged history is independent of the current confounding noise, so
conditioning on it removes the spurious state-action correlation that
plain regression absorbs.

Stage 1 fits a mixture-density rollout model of the window remainder
(the missing k state/action pairs plus the target action) given the
instrument prefix.  Stage 2 samples completions from that model, fresh
every epoch, and regresses the generated action on the generated window.
With K-fold cross-fitting each fold's completions come from a model
trained on the complementary trajectories, which debiases the two-stage
composition; K=1 degenerates to the plain two-stage algorithm.

Diagnostics in this module estimate the moment error of a policy (via an
auxiliary instrument regression with an empirically calibrated noise
floor), probe the ill-posedness of the policy class, run permutation
tests for horizon selection, and assemble the imitation-gap bound
``T^2 (c * eps * nu + 2 * delta)`` on the linear-Gaussian environment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .approx import (AdamW, MixtureDensity, Mlp, Standardizer, TrainConfig,
                     as_generator, fit_density, fit_regressor)
from .demos import DemonstrationSet, WindowLayout, WindowSet, extract_windows, kfold_partition
from .envs import EnvSpec, InvalidConfigError
from .gaussian import LinearGaussianSystem, gaussian_cdf


def derive_rngs(seed, n: int) -> list[np.random.Generator]:
    """Split a seed-like object into ``n`` independent generators."""
    if isinstance(seed, np.random.Generator):
        return seed.spawn(n)
    if isinstance(seed, np.random.SeedSequence):
        children = seed.spawn(n)
    else:
        children = np.random.SeedSequence(int(seed)).spawn(n)
    return [as_generator(c) for c in children]


# --- policies ----------------------------------------------------------------


@dataclass
class HistoryPolicy:
    """Deterministic policy over fixed look-back windows."""

    mlp: Mlp
    layout: WindowLayout
    x_scaler: Standardizer
    y_scaler: Standardizer
    trained_with: str  # "dml" | "bc_seq"

    @property
    def lookback(self) -> int:
        return self.layout.L

    def predict(self, X_raw: np.ndarray) -> np.ndarray:
        out = self.mlp.forward(self.x_scaler.transform(np.atleast_2d(X_raw)))
        return self.y_scaler.inverse(out)


@dataclass
class StatePolicy:
    """Memoryless policy: current state in, action out."""

    mlp: Mlp
    s_scaler: Standardizer
    y_scaler: Standardizer
    trained_with: str = "bc"

    @property
    def lookback(self) -> int:
        return 1

    def predict(self, S_raw: np.ndarray) -> np.ndarray:
        out = self.mlp.forward(self.s_scaler.transform(np.atleast_2d(S_raw)))
        return self.y_scaler.inverse(out)


def window_predictor(policy, layout: WindowLayout):
    """Adapt any policy to a map from raw regressor windows to actions."""
    if isinstance(policy, StatePolicy):
        return lambda X: policy.predict(np.atleast_2d(X)[:, layout.s_t_slice])
    if isinstance(policy, HistoryPolicy):
        return policy.predict
    if callable(policy):
        return policy
    raise TypeError(f"cannot adapt {type(policy)!r} to a window predictor")


# --- stage 1: rollout model ----------------------------------------------------


@dataclass
class RolloutModel:
    """Conditional mixture over the window remainder given the instrument."""

    mdn: MixtureDensity
    layout: WindowLayout
    z_scaler: Standardizer
    m_scaler: Standardizer
    loss_trace: list = field(default_factory=list)

    def sample_remainder(self, Z_raw: np.ndarray, rng) -> np.ndarray:
        """Draw the missing segment in raw units for each instrument row."""
        z_std = self.z_scaler.transform(np.atleast_2d(Z_raw))
        return self.m_scaler.inverse(self.mdn.sample(z_std, rng))

    def complete(self, Z_raw: np.ndarray, rng):
        """Sampled (window, action) pairs whose prefix is the given instrument."""
        m = self.sample_remainder(Z_raw, rng)
        da = self.layout.da
        X_hat = np.concatenate([np.atleast_2d(Z_raw), m[:, :-da]], axis=1)
        return X_hat, m[:, -da:]


def _remainder_targets(ws: WindowSet) -> np.ndarray:
    zd = ws.layout.z_dim
    return np.concatenate([ws.regressor[:, zd:], ws.target], axis=1)


def fit_rollout_model(windows: WindowSet, k: int, cfg: TrainConfig,
                      rng) -> RolloutModel:
    """Maximum-likelihood fit of the remainder mixture; trace kept on the model."""
    if len(windows) == 0:
        raise InvalidConfigError("no windows to fit the rollout model on")
    if windows.layout.k != k:
        raise InvalidConfigError(
            f"windows were built for k={windows.layout.k}, requested k={k}")
    init_rng, train_rng = derive_rngs(rng, 2)
    Z = windows.instrument
    M = _remainder_targets(windows)
    z_scaler = Standardizer.fit(Z)
    m_scaler = Standardizer.fit(M)
    mdn = MixtureDensity(windows.layout.z_dim, cfg.hidden, M.shape[1],
                         cfg.n_components, init_rng)
    trace = fit_density(mdn, z_scaler.transform(Z), m_scaler.transform(M),
                        cfg, train_rng)
    return RolloutModel(mdn=mdn, layout=windows.layout, z_scaler=z_scaler,
                        m_scaler=m_scaler, loss_trace=trace)


def held_out_loglik(model: RolloutModel, windows: WindowSet) -> float:
    z = model.z_scaler.transform(windows.instrument)
    m = model.m_scaler.transform(_remainder_targets(windows))
    return float(model.mdn.loglik(z, m).mean())


# --- stage 2: policy regression on generated completions ------------------------


def _instrument_rows(instruments) -> np.ndarray:
    if isinstance(instruments, WindowSet):
        return instruments.instrument
    return np.atleast_2d(np.asarray(instruments, dtype=np.float64))


def _generated_epoch(pairs, cfg: TrainConfig, sample_rng, feature):
    """One epoch's worth of completions, stacked per instrument.

    Returns (X_all, T_all): X_all is (n, S, in_dim) holding S independently
    generated inputs per instrument.  With ``stage2_pairing="independent"``
    (the default) T_all is (n, da): the mean action over S further draws
    *disjoint* from the input draws, so the target's noise shares nothing
    with the inputs beyond the instrument itself.  With ``"joint"`` T_all
    is (n, S, da): each input keeps the action generated alongside it,
    which is the single-draw algorithm read literally.
    """
    S = max(1, cfg.samples_per_instrument)
    joint = cfg.stage2_pairing == "joint"
    xs_all, tg_all = [], []
    for model, Z in pairs:
        xs, ys = [], []
        for _ in range(S):
            X_hat, Y_hat = model.complete(Z, sample_rng)
            xs.append(feature(X_hat))
            ys.append(Y_hat)
        if joint:
            tgt = np.stack(ys, axis=1)
        else:
            tgt = np.zeros_like(ys[0])
            for _ in range(S):
                _, Y_hat = model.complete(Z, sample_rng)
                tgt += Y_hat
            tgt /= S
        xs_all.append(np.stack(xs, axis=1))
        tg_all.append(tgt)
    return np.concatenate(xs_all), np.concatenate(tg_all)


def _fit_policy_on_folds(pairs, layout: WindowLayout, x_scaler, y_scaler,
                         cfg: TrainConfig, rng, trained_with: str,
                         in_slice: slice | None = None) -> HistoryPolicy | StatePolicy:
    """Shared stage-2 loop: ``pairs`` holds (rollout model, instrument rows).

    Completions are redrawn every epoch (caching a single draw per
    instrument would bias the regression toward that draw's noise).  Under
    independent pairing each instrument contributes the mean prediction
    over its S generated windows against its exogenous-noise target; under
    joint pairing every draw is its own supervised row.  ``in_slice``
    restricts the policy's input to a slice of the generated window (the
    state-only baseline uses the current-state slot).
    """
    init_rng, epoch_rng, sample_rng = derive_rngs(rng, 3)
    in_dim = layout.x_dim if in_slice is None else (in_slice.stop - in_slice.start)
    mlp = Mlp(in_dim, cfg.hidden, layout.da, init_rng)
    opt = AdamW(mlp.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    n_inst = sum(z.shape[0] for _, z in pairs)
    total_steps = cfg.epochs * -(-n_inst // cfg.batch_size)
    step = 0
    S = max(1, cfg.samples_per_instrument)
    joint = cfg.stage2_pairing == "joint"

    def feature(X_hat):
        X_hat = X_hat if in_slice is None else X_hat[:, in_slice]
        return x_scaler.transform(X_hat)

    for _ in range(cfg.epochs):
        X_all, T_all = _generated_epoch(pairs, cfg, sample_rng, feature)
        T_flat = y_scaler.transform(T_all.reshape(-1, layout.da)).reshape(T_all.shape)
        order = epoch_rng.permutation(n_inst)
        for start in range(0, n_inst, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            B = idx.size
            Xb = X_all[idx].reshape(B * S, -1)
            out, cache = mlp._forward_cached(Xb)
            if joint:
                resid = out - T_flat[idx].reshape(B * S, -1)
                d_out = 2.0 * resid / (B * S)
            else:
                resid = out.reshape(B, S, -1).mean(axis=1) - T_flat[idx]
                d_out = np.repeat(2.0 * resid / (B * S), S, axis=0)
            if not np.all(np.isfinite(resid)):
                raise InvalidConfigError("non-finite stage-2 residual")
            grads = mlp._backward(cache, d_out)
            opt.step(mlp.params, grads, lr_scale=cfg.lr_scale(step, total_steps))
            step += 1
    if in_slice is not None:
        return StatePolicy(mlp=mlp, s_scaler=x_scaler, y_scaler=y_scaler,
                           trained_with=trained_with)
    return HistoryPolicy(mlp=mlp, layout=layout, x_scaler=x_scaler,
                         y_scaler=y_scaler, trained_with=trained_with)


def fit_policy_stage2(rollout: RolloutModel, instruments, cfg: TrainConfig,
                      rng, reference_windows: WindowSet | None = None) -> HistoryPolicy:
    """Train the history policy on completions of the given instruments.

    Input/output standardization comes from real windows (``reference_windows``
    if supplied, otherwise the instruments argument must be a WindowSet).
    """
    ref = reference_windows or instruments
    if not isinstance(ref, WindowSet):
        raise InvalidConfigError("need a WindowSet to derive standardization from")
    x_scaler = Standardizer.fit(ref.regressor)
    y_scaler = Standardizer.fit(ref.target)
    Z = _instrument_rows(instruments)
    return _fit_policy_on_folds([(rollout, Z)], rollout.layout, x_scaler,
                                y_scaler, cfg, rng, trained_with="dml")


def dml_il_train(demos: DemonstrationSet, k: int, K: int, cfg: TrainConfig,
                 rng, L: int | None = None):
    """Cross-fitted two-stage training; returns (policy, artifacts).

    K=1 is exactly the composition ``fit_rollout_model`` then
    ``fit_policy_stage2`` under the same derived seeds.  For K>1 each fold's
    instruments are completed by the model trained on the complementary
    trajectories, and no step of a trajectory ever serves both as a model's
    training data and as that model's completion target.
    """
    demos = demos.censor()
    L = L if L is not None else k + 3
    windows = extract_windows(demos, k=k, L=L)
    n_traj = len(demos)
    if K < 1 or K > n_traj:
        raise InvalidConfigError(f"need 1 <= K <= {n_traj} folds, got {K}")

    if K == 1:
        rollout_rng, stage2_rng = derive_rngs(rng, 2)
        model = fit_rollout_model(windows, k, cfg, rollout_rng)
        policy = fit_policy_stage2(model, windows, cfg, stage2_rng)
        return policy, {"rollout_models": [model], "folds": [np.arange(n_traj)],
                        "windows": windows}

    seeds = derive_rngs(rng, K + 2)
    part_rng, stage2_rng, model_rngs = seeds[0], seeds[1], seeds[2:]
    folds = kfold_partition(n_traj, K, part_rng)
    all_ids = np.arange(n_traj)
    models, pairs = [], []
    for i, fold in enumerate(folds):
        complement = np.setdiff1d(all_ids, fold)
        model = fit_rollout_model(windows.for_trajectories(complement), k,
                                  cfg, model_rngs[i])
        models.append(model)
        pairs.append((model, windows.for_trajectories(fold).instrument))
    x_scaler = Standardizer.fit(windows.regressor)
    y_scaler = Standardizer.fit(windows.target)
    policy = _fit_policy_on_folds(pairs, windows.layout, x_scaler, y_scaler,
                                  cfg, stage2_rng, trained_with="dml")
    return policy, {"rollout_models": models, "folds": folds, "windows": windows}


# --- moment-error estimation ----------------------------------------------------


@dataclass
class CmrErrorResult:
    epsilon: float
    noise_floor: float | None = None
    degenerate_instruments: bool = False


def cmr_error(policy, windows: WindowSet, cfg: TrainConfig, rng,
              with_floor: bool = False) -> CmrErrorResult:
    """Estimate ``|| E[a_t - pi(h_t) | h_{t-k}] ||_2`` on held-out windows.

    An auxiliary regressor g maps the instrument to the policy residual;
    the estimate is the root mean square of g's fitted values.  The noise
    floor re-runs the identical fit against exogenous i.i.d. residuals of
    matched variance: whatever RMS g extracts from pure noise is the
    resolution limit of the estimator, not signal.
    """
    predict = window_predictor(policy, windows.layout)
    R = windows.target - np.atleast_2d(predict(windows.regressor))
    if np.max(np.abs(R)) < 1e-12:
        return CmrErrorResult(epsilon=0.0, noise_floor=0.0 if with_floor else None)

    Z = windows.instrument
    degenerate = bool(np.all(Z.std(axis=0) < 1e-12))
    g_init, g_train, floor_rng = derive_rngs(rng, 3)
    g_state = g_init.bit_generator.state
    t_state = g_train.bit_generator.state

    def _fit_rms(targets: np.ndarray) -> float:
        g_init.bit_generator.state = g_state
        g_train.bit_generator.state = t_state
        z_scaler = Standardizer.fit(Z)
        g = Mlp(Z.shape[1], cfg.hidden, targets.shape[1], g_init)
        fit_regressor(g, z_scaler.transform(Z), targets, cfg, g_train)
        fitted = g.forward(z_scaler.transform(Z))
        return float(np.sqrt(np.mean(np.sum(fitted ** 2, axis=1))))

    eps = _fit_rms(R)
    floor = None
    if with_floor:
        null = floor_rng.normal(0.0, R.std(axis=0), size=R.shape)
        floor = _fit_rms(null)
    return CmrErrorResult(epsilon=eps, noise_floor=floor,
                          degenerate_instruments=degenerate)


@dataclass
class IllPosednessResult:
    nu_lb: float
    per_candidate: dict
    infinite: bool = False


def ill_posedness_lb(candidates, expert_actions: np.ndarray,
                     windows: WindowSet, cfg: TrainConfig, rng) -> IllPosednessResult:
    """Candidate-set lower bound on the class ill-posedness.

    ``candidates`` maps names to policies/predictors; each contributes the
    ratio of its distance to the expert over its moment error.  The true
    quantity takes a supremum over the whole class, so this is a lower
    bound.  Candidates equal to the expert are excluded by construction
    (their ratio is 0/0).
    """
    expert_actions = np.atleast_2d(expert_actions)
    rngs = derive_rngs(rng, len(candidates))
    table, nu, infinite = {}, 0.0, False
    for (name, cand), crng in zip(candidates.items(), rngs):
        predict = window_predictor(cand, windows.layout)
        num = float(np.sqrt(np.mean(
            np.sum((expert_actions - np.atleast_2d(predict(windows.regressor))) ** 2,
                   axis=1))))
        den = cmr_error(cand, windows, cfg, crng).epsilon
        if den == 0.0:
            if num > 0.0:
                infinite = True
                table[name] = {"policy_err": num, "cmr_error": den, "ratio": math.inf}
            continue
        ratio = num / den
        table[name] = {"policy_err": num, "cmr_error": den, "ratio": ratio}
        nu = max(nu, ratio)
    return IllPosednessResult(nu_lb=math.inf if infinite else nu,
                              per_candidate=table, infinite=infinite)


# --- total-variation stability ---------------------------------------------------


def tv_shifted_gaussian(delta: float, sigma: float) -> float:
    """TV distance between N(a, sigma^2 I) and N(a', sigma^2 I) at ||a-a'|| = delta."""
    if delta < 0 or sigma < 0:
        raise InvalidConfigError("delta and sigma must be nonnegative")
    if sigma == 0.0:
        return 1.0 if delta > 0 else 0.0
    return float(2.0 * gaussian_cdf(delta / (2.0 * sigma)) - 1.0)


def tv_stability_constant(sigma: float) -> float:
    """c with tv_shifted_gaussian(d, sigma) <= c*d for all d; 1/2 at sigma=1."""
    if sigma <= 0.0:
        raise InvalidConfigError("sigma must be positive")
    return 1.0 / (2.0 * sigma)


# --- horizon selection ------------------------------------------------------------


@dataclass
class HorizonSelection:
    k_hat: int
    p_values: dict
    rejected: dict
    failed: bool


def _two_stage_linear(ws_fit: WindowSet):
    """Closed-form instrumented linear pilot (projection then regression)."""
    x_scaler = Standardizer.fit(ws_fit.regressor)
    y_scaler = Standardizer.fit(ws_fit.target)
    X = x_scaler.transform(ws_fit.regressor)
    z_scaler = x_scaler.slice(slice(0, ws_fit.layout.z_dim))
    Z = np.concatenate([z_scaler.transform(ws_fit.instrument),
                        np.ones((len(ws_fit), 1))], axis=1)
    B, *_ = np.linalg.lstsq(Z, X, rcond=None)
    X_hat = np.concatenate([Z @ B, np.ones((len(ws_fit), 1))], axis=1)
    theta, *_ = np.linalg.lstsq(X_hat, y_scaler.transform(ws_fit.target), rcond=None)

    def predict(X_raw):
        Xs = x_scaler.transform(np.atleast_2d(X_raw))
        X1 = np.concatenate([Xs, np.ones((Xs.shape[0], 1))], axis=1)
        return y_scaler.inverse(X1 @ theta)

    return predict


def _block_permutation_pvalues(resid: np.ndarray, Z: np.ndarray,
                               traj: np.ndarray, n_permutations: int,
                               rng) -> np.ndarray:
    """Permutation p-value per instrument coordinate.

    The test statistic is the max over action dims of |pearson corr|.
    Residuals are permuted in whole-trajectory blocks so within-episode
    dependence survives into the null resamples.
    """
    rng = as_generator(rng)
    ids = np.unique(traj)
    blocks = np.stack([resid[traj == i] for i in ids])      # (n_b, w, da)
    n = resid.shape[0]
    Zc = Z - Z.mean(axis=0)
    z_norm = np.sqrt((Zc ** 2).sum(axis=0))
    z_norm = np.maximum(z_norm, 1e-300)

    def stats(r_flat: np.ndarray) -> np.ndarray:
        rc = r_flat - r_flat.mean(axis=0)
        r_norm = np.maximum(np.sqrt((rc ** 2).sum(axis=0)), 1e-300)
        corr = np.abs(rc.T @ Zc) / (r_norm[:, None] * z_norm[None, :])
        return corr.max(axis=0)                              # (z_dim,)

    obs = stats(resid)
    exceed = np.zeros_like(obs)
    for _ in range(n_permutations):
        perm = rng.permutation(ids.size)
        r_perm = blocks[perm].reshape(n, -1)
        exceed += stats(r_perm) >= obs
    return (1.0 + exceed) / (1.0 + n_permutations)


def select_horizon(demos: DemonstrationSet, k_max: int,
                   significance: float = 0.05, rng=0,
                   n_permutations: int = 1000) -> HorizonSelection:
    """Smallest candidate horizon whose pilot residual passes the
    instrument-independence permutation test (Bonferroni over coordinates).

    A valid instrument leaves the pilot's residual uncorrelated with every
    instrument coordinate; an underestimated horizon leaks confounding
    noise into the instrument and the correlation shows.  If no candidate
    passes, the largest is returned with ``failed=True`` (any upper bound
    of the true horizon is a sound input for training).
    """
    demos = demos.censor()
    n_traj = len(demos)
    if n_traj < 2:
        raise InvalidConfigError("horizon selection needs at least two trajectories")
    fit_ids = np.arange(n_traj // 2)
    test_ids = np.arange(n_traj // 2, n_traj)
    rngs = derive_rngs(rng, k_max)
    p_values, rejected = {}, {}
    k_hat, failed = None, False
    for k_cand in range(1, k_max + 1):
        ws = extract_windows(demos, k=k_cand, L=k_cand + 3)
        ws_fit = ws.for_trajectories(fit_ids)
        ws_test = ws.for_trajectories(test_ids)
        pilot = _two_stage_linear(ws_fit)
        resid = ws_test.target - pilot(ws_test.regressor)
        pv = _block_permutation_pvalues(resid, ws_test.instrument, ws_test.traj,
                                        n_permutations, rngs[k_cand - 1])
        p_values[k_cand] = pv.tolist()
        reject = bool(pv.min() < significance / pv.size)
        rejected[k_cand] = reject
        if not reject and k_hat is None:
            k_hat = k_cand
    if k_hat is None:
        k_hat, failed = k_max, True
    return HorizonSelection(k_hat=k_hat, p_values=p_values, rejected=rejected,
                            failed=failed)


# --- imitation-gap diagnostic -------------------------------------------------------


@dataclass
class CmrDiagnostics:
    """Everything the gap bound needs, plus the measurements around it."""

    cmr_error: float
    cmr_noise_floor: float
    ill_posedness_lb: float
    nu_policy: float
    tv_gap: float
    c_stability: float
    gap_bound: float
    horizon_T: int
    policy_err: float
    gap_measured: float | None = None
    gap_se: float | None = None
    k_selected: int | None = None
    p_values: list | None = None
    flags: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "cmr_error": self.cmr_error,
            "cmr_noise_floor": self.cmr_noise_floor,
            "nu_lb": self.ill_posedness_lb,
            "nu_policy": self.nu_policy,
            "delta_hat": self.tv_gap,
            "c": self.c_stability,
            "gap_bound": self.gap_bound,
            "gap_measured": self.gap_measured,
            "k_selected": self.k_selected,
            "p_values": self.p_values,
            "policy_err": self.policy_err,
            "T": self.horizon_T,
            "flags": self.flags,
        }


def action_noise_std(spec: EnvSpec) -> float:
    """Std of the additive action noise ``noise_scale * ueps``."""
    return abs(spec.noise_scale) * spec.ueps_draw_std / math.sqrt(spec.k)


def gap_bound_diagnostic(policy, heldout_windows: WindowSet,
                         cfg: TrainConfig, rng,
                         system: LinearGaussianSystem | None = None,
                         extra_candidates: dict | None = None) -> CmrDiagnostics:
    """Assemble the bound ``T^2 (c * eps * nu + 2 * delta)`` for one policy.

    Inside the bound the class-level ill-posedness is replaced by the
    per-policy ratio ||expert - policy|| / eps, which turns the first term
    into ``c * ||expert - policy||``: the form the bound's proof actually
    instantiates.  The candidate-set lower bound is reported alongside.
    Requires uncensored windows (the expert is evaluated at window times)
    and, for the TV term, the linear-Gaussian conditioning oracle.
    """
    spec = heldout_windows.env_spec
    if heldout_windows.uo is None:
        raise InvalidConfigError("gap diagnostic needs uncensored windows")
    if system is None:
        if spec.env != "linear_gaussian":
            raise InvalidConfigError(
                "gap diagnostic is only supported on the linear_gaussian env")
        system = LinearGaussianSystem(spec)

    from .envs import expert_action

    eps_rng, nu_rng = derive_rngs(rng, 2)
    expert_a = np.asarray(expert_action(
        heldout_windows.regressor[:, heldout_windows.layout.s_t_slice][:, 0],
        heldout_windows.uo, spec)).reshape(-1, 1)

    err = cmr_error(policy, heldout_windows, cfg, eps_rng, with_floor=True)
    predict = window_predictor(policy, heldout_windows.layout)
    pol_err = float(np.sqrt(np.mean(np.sum(
        (expert_a - np.atleast_2d(predict(heldout_windows.regressor))) ** 2, axis=1))))

    candidates = {"policy": policy, "zero": lambda X: np.zeros((len(X), 1))}
    candidates.update(extra_candidates or {})
    nu = ill_posedness_lb(candidates, expert_a, heldout_windows, cfg, nu_rng)

    c = tv_stability_constant(action_noise_std(spec))
    ts = np.unique(heldout_windows.t)
    if ts.size > 24:
        ts = ts[np.linspace(0, ts.size - 1, 24).astype(int)]
    delta = system.delta_hat(ts, heldout_windows.layout.L)

    nu_policy = pol_err / err.epsilon if err.epsilon > 0 else math.inf
    T = spec.T
    gap_bound = T * T * (c * err.epsilon * nu_policy + 2.0 * delta) \
        if math.isfinite(nu_policy) else math.inf
    return CmrDiagnostics(
        cmr_error=err.epsilon, cmr_noise_floor=err.noise_floor,
        ill_posedness_lb=nu.nu_lb, nu_policy=nu_policy, tv_gap=delta,
        c_stability=c, gap_bound=gap_bound, horizon_T=T, policy_err=pol_err,
        flags={"degenerate_instruments": err.degenerate_instruments,
               "corollary_no_uo": spec.env == "linear_gaussian"
               and spec.params.get("beta", 0.0) == 0.0},
    )
