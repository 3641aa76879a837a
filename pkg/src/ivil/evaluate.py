"""Online policy evaluation, reward scaling, and trend sweeps.

Episodes run in lockstep as one vectorized batch: all exogenous noise is
pre-drawn per episode from its own spawned seed, so results are
deterministic in the evaluation seed and independent of batch composition.
Aggregation runs in fixed episode order.

Reward scaling follows the two-anchor convention: 1 is the expert run with
the confounding noise forced to zero (the expert-observable signal stays
active), 0 is a uniform-random policy in the confounded environment.

History policies are warmed up by left-padding the window with the initial
state (zeros in the action slots); the first L steps are excluded from
metrics, so reported numbers describe the policy operating on full
windows.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .approx import TrainConfig
from .cmr import CmrDiagnostics, HistoryPolicy, StatePolicy, dml_il_train
from .demos import WindowLayout, generate_demonstrations
from .envs import (EnvSpec, InvalidConfigError, Z_OVERFLOW, _plane_expert,
                   expert_action, linear_gaussian_noise, plane_noise)

CSV_COLUMNS = ["method", "env", "k_true", "k_given", "seed", "avg_reward",
               "scaled_reward", "action_mse", "cmr_error", "gap_bound",
               "gap_measured", "runtime_s"]


@dataclass
class EvalReport:
    """Per-policy evaluation summary plus per-episode series."""

    avg_reward: float
    action_mse: float
    episodes: int
    reward_std: float
    skip_steps: int
    per_episode_reward: np.ndarray
    per_episode_mse: np.ndarray
    diverged: list = field(default_factory=list)
    scaled_reward: float | None = None

    @property
    def log10_action_mse(self) -> float:
        return math.log10(self.action_mse) if self.action_mse > 0 else -math.inf


@dataclass(frozen=True)
class RewardAnchors:
    j_random: float
    j_clean_expert: float

    def scale(self, avg_reward: float) -> float:
        span = self.j_clean_expert - self.j_random
        if span == 0.0:
            raise InvalidConfigError("degenerate anchors: expert equals random")
        return (avg_reward - self.j_random) / span

    def to_json(self) -> dict:
        return {"j_random": self.j_random, "j_clean_expert": self.j_clean_expert}


def _episode_seeds(seed, episodes: int) -> np.ndarray:
    return np.random.SeedSequence(int(seed)).generate_state(episodes, dtype=np.uint64)


def _policy_rngs(ep_seeds) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=int(s), spawn_key=(1,)))) for s in ep_seeds]


def _stack_plane_noise(spec: EnvSpec, ep_seeds):
    uo = np.empty((ep_seeds.size, spec.T))
    ueps = np.empty((ep_seeds.size, spec.T))
    for i, s in enumerate(ep_seeds):
        uo[i], ueps[i] = plane_noise(spec, int(s))
    return uo, ueps


def _stack_lg_noise(spec: EnvSpec, ep_seeds):
    uo = np.empty(ep_seeds.size)
    ueps = np.empty((ep_seeds.size, spec.T))
    w = np.empty((ep_seeds.size, spec.T))
    for i, s in enumerate(ep_seeds):
        uo[i], ueps[i], w[i] = linear_gaussian_noise(spec, int(s))
    return uo, ueps, w


class _WindowBuffer:
    """Rolling look-back features for a batch of episodes."""

    def __init__(self, n_episodes: int, layout: WindowLayout):
        self.layout = layout
        self.S = np.zeros((n_episodes, layout.L, layout.ds))
        self.A = np.zeros((n_episodes, max(layout.L - 1, 1), layout.da))
        self._primed = False

    def push_state(self, s: np.ndarray) -> None:
        s = s.reshape(-1, self.layout.ds)
        if not self._primed:
            # Left-pad by repeating the initial state; action slots stay zero.
            self.S[:] = s[:, None, :]
            self._primed = True
        else:
            self.S[:, :-1] = self.S[:, 1:]
            self.S[:, -1] = s

    def push_action(self, a: np.ndarray) -> None:
        if self.layout.L > 1:
            self.A[:, :-1] = self.A[:, 1:]
            self.A[:, -1] = a.reshape(-1, self.layout.da)

    def features(self) -> np.ndarray:
        L = self.layout.L
        X = np.empty((self.S.shape[0], self.layout.x_dim))
        for i in range(L):
            X[:, self.layout.state_slot(i)] = self.S[:, i]
            if i < L - 1:
                X[:, self.layout.action_slot(i)] = self.A[:, i]
        return X


def _intended(policy, spec, s_vec, uo_vec, buffer, rand_draws, t):
    if policy == "expert":
        if spec.env == "plane_ticket":
            return np.asarray(_plane_expert(s_vec, uo_vec))
        return np.asarray(expert_action(s_vec, uo_vec, spec))
    if policy == "random":
        return rand_draws[:, t]
    if isinstance(policy, StatePolicy):
        return policy.predict(s_vec[:, None])[:, 0]
    if isinstance(policy, HistoryPolicy):
        return policy.predict(buffer.features())[:, 0]
    if callable(policy):
        return np.asarray(policy(s_vec))
    raise InvalidConfigError(f"unsupported policy {policy!r}")


def evaluate_policy(env_spec: EnvSpec, policy, episodes: int, seed,
                    noised: bool = True, skip_steps: int | None = None,
                    anchors: RewardAnchors | None = None) -> EvalReport:
    """Run ``episodes`` online rollouts and report reward and action error.

    ``action_mse`` compares the policy's intended action with what the
    expert would do at the states the policy itself visits.  History
    policies skip their first L steps from the metrics unless
    ``skip_steps`` overrides the warm-up.
    """
    if episodes < 1:
        raise InvalidConfigError("need at least one evaluation episode")
    spec = env_spec
    ep_seeds = _episode_seeds(seed, episodes)
    T = spec.T

    if skip_steps is None:
        skip_steps = policy.lookback if isinstance(policy, HistoryPolicy) else 0
    if skip_steps >= T:
        raise InvalidConfigError("warm-up leaves no steps to evaluate")

    buffer = None
    if isinstance(policy, HistoryPolicy):
        buffer = _WindowBuffer(episodes, policy.layout)

    rand_draws = None
    if policy == "random":
        lo, hi = spec.action_bounds
        rand_draws = np.stack([r.uniform(lo, hi, size=T)
                               for r in _policy_rngs(ep_seeds)])

    reward_sum = np.zeros(episodes)
    sq_err_sum = np.zeros(episodes)
    counted = np.zeros(episodes)
    alive = np.ones(episodes, dtype=bool)

    if spec.env == "plane_ticket":
        uo_all, ueps_all = _stack_plane_noise(spec, ep_seeds)
        if not noised:
            ueps_all = np.zeros_like(ueps_all)
        s_prev = np.zeros(episodes)
        for t in range(T):
            uo, ueps = uo_all[:, t], ueps_all[:, t]
            sgn = np.where(s_prev >= 0, 1.0, -1.0)
            s = sgn * uo - ueps
            if buffer is not None:
                buffer.push_state(s)
            intended = _intended(policy, spec, s, uo, buffer, rand_draws, t)
            a = intended + spec.noise_scale * ueps
            r = -(s + uo * a) ** 2
            if t >= skip_steps:
                reward_sum += r
                expert = np.asarray(_plane_expert(s, uo))
                sq_err_sum += (intended - expert) ** 2
                counted += 1
            if buffer is not None:
                buffer.push_action(a)
            s_prev = s
    else:
        uo_all, ueps_all, w_all = _stack_lg_noise(spec, ep_seeds)
        if not noised:
            ueps_all = np.zeros_like(ueps_all)
        p = spec.params
        z_prev = np.zeros(episodes)
        a_prev = np.zeros(episodes)
        for t in range(T):
            ueps, w = ueps_all[:, t], w_all[:, t]
            z = p["gamma"] * z_prev + a_prev + w
            bad = ~np.isfinite(z) | (np.abs(z) > Z_OVERFLOW)
            if np.any(bad & alive):
                alive &= ~bad
            z = np.where(alive, z, 0.0)
            s = z + p["c_s"] * ueps
            if buffer is not None:
                buffer.push_state(s)
            intended = _intended(policy, spec, s, uo_all, buffer, rand_draws, t)
            a = intended + spec.noise_scale * ueps
            expert = p["alpha"] * s + p["beta"] * uo_all
            r = 1.0 / (1.0 + (a - expert) ** 2)
            if t >= skip_steps:
                live = alive.astype(float)
                reward_sum += r * live
                sq_err_sum += (intended - expert) ** 2 * live
                counted += live
            if buffer is not None:
                buffer.push_action(a)
            z_prev, a_prev = z, a

    ok = alive & (counted > 0)
    if not np.any(ok):
        raise DivergedEvaluationError("every evaluation episode diverged")
    per_reward = np.where(ok, reward_sum / np.maximum(counted, 1), np.nan)
    per_mse = np.where(ok, sq_err_sum / np.maximum(counted, 1), np.nan)
    avg_reward = float(per_reward[ok].mean())
    report = EvalReport(
        avg_reward=avg_reward,
        action_mse=float(per_mse[ok].mean()),
        episodes=episodes,
        reward_std=float(per_reward[ok].std()),
        skip_steps=int(skip_steps),
        per_episode_reward=per_reward,
        per_episode_mse=per_mse,
        diverged=np.flatnonzero(~ok).tolist(),
    )
    if anchors is not None:
        report.scaled_reward = anchors.scale(avg_reward)
    return report


class DivergedEvaluationError(RuntimeError):
    pass


def reward_anchors(env_spec: EnvSpec, seed, episodes: int = 50) -> RewardAnchors:
    """Anchor rewards: random policy in the confounded env (0) and the
    expert with the confounding noise forced off (1)."""
    rand_seed, clean_seed = np.random.SeedSequence(int(seed)).generate_state(2)
    rand = evaluate_policy(env_spec, "random", episodes, int(rand_seed))
    clean = evaluate_policy(env_spec, "expert", episodes, int(clean_seed),
                            noised=False)
    return RewardAnchors(j_random=rand.avg_reward,
                         j_clean_expert=clean.avg_reward)


def spearman(x, y) -> float:
    """Spearman rank correlation (ties broken by order; fine for sweeps)."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    rx = np.argsort(np.argsort(x)).astype(float)
    ry = np.argsort(np.argsort(y)).astype(float)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float((rx ** 2).sum() * (ry ** 2).sum()))
    return float((rx * ry).sum() / denom) if denom else 0.0


def misspecification_sweep(env_spec: EnvSpec, given_ks, cfg: TrainConfig,
                           seeds, n_traj: int, K: int = 1,
                           eval_episodes: int = 20,
                           anchor_episodes: int = 50):
    """Train with each assumed horizon against data from the true one.

    Returns (rows, table): one row per (given k, seed) with the scaled
    reward, and an aggregate mean/std table in descending given-k order.
    """
    if len(list(seeds)) < 2:
        raise InvalidConfigError("aggregation needs at least two seeds")
    anchors = reward_anchors(env_spec, seed=_anchor_seed(env_spec),
                             episodes=anchor_episodes)
    rows = []
    for k_given in given_ks:
        if not (1 <= k_given <= env_spec.k):
            raise InvalidConfigError("given horizons must lie in [1, true k]")
        for seed in seeds:
            demo_seed, train_seed, eval_seed = \
                np.random.SeedSequence(int(seed)).generate_state(3)
            demos = generate_demonstrations(env_spec, n_traj, seed=int(demo_seed))
            policy, _ = dml_il_train(demos.censor(), k=int(k_given), K=K,
                                     cfg=cfg, rng=int(train_seed))
            report = evaluate_policy(env_spec, policy, eval_episodes,
                                     int(eval_seed), anchors=anchors)
            rows.append({"k_given": int(k_given), "seed": int(seed),
                         "scaled_reward": report.scaled_reward,
                         "action_mse": report.action_mse})
    table = []
    for k_given in sorted(set(r["k_given"] for r in rows), reverse=True):
        vals = np.array([r["scaled_reward"] for r in rows
                         if r["k_given"] == k_given])
        table.append({"k_given": k_given, "mean": float(vals.mean()),
                      "std": float(vals.std(ddof=1)),
                      "median": float(np.median(vals))})
    return rows, table


def _anchor_seed(env_spec: EnvSpec) -> int:
    # Anchors are a property of the environment alone; key their seed off
    # the spec so every run of the same spec shares them.
    import hashlib
    import json as _json

    blob = _json.dumps(env_spec.to_json(), sort_keys=True).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big") >> 1


def gap_report(env_spec: EnvSpec, policy, diagnostics: CmrDiagnostics,
               seed, episodes: int = 200, tolerance: float = 0.1) -> dict:
    """Measure the imitation gap online and join it with the bound parts.

    Both the expert and the policy are evaluated in the confounded
    environment with the same warm-up skip, and the gap uses total
    per-episode reward (per-step mean times T).
    """
    skip = policy.lookback if isinstance(policy, HistoryPolicy) else 0
    exp_seed, pol_seed = np.random.SeedSequence(int(seed)).generate_state(2)
    expert = evaluate_policy(env_spec, "expert", episodes, int(exp_seed),
                             skip_steps=skip)
    learned = evaluate_policy(env_spec, policy, episodes, int(pol_seed),
                              skip_steps=skip)
    T = env_spec.T
    gap = T * (expert.avg_reward - learned.avg_reward)
    se = T * math.sqrt(expert.reward_std ** 2 / expert.episodes
                       + learned.reward_std ** 2 / learned.episodes)
    diagnostics.gap_measured = gap
    diagnostics.gap_se = se
    violated = gap > diagnostics.gap_bound * (1.0 + tolerance) + 3.0 * se
    diagnostics.flags["bound_violated"] = bool(violated)
    out = diagnostics.to_json()
    out.update({"gap_se": se, "expert_avg_reward": expert.avg_reward,
                "policy_avg_reward": learned.avg_reward})
    return out


# --- CSV ---------------------------------------------------------------------


def write_csv(path, rows: list[dict]) -> None:
    """RFC-4180 rows under the fixed column contract.

    ``runtime_s`` is intentionally blank: wall-clock timings belong to the
    manifest so artifacts stay byte-identical across reruns.
    """
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, quoting=csv.QUOTE_MINIMAL)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([_csv_cell(row.get(col)) for col in CSV_COLUMNS])


def append_csv(path, rows: list[dict], write_header: bool) -> None:
    with open(path, "a", newline="") as f:
        writer = csv.writer(f, quoting=csv.QUOTE_MINIMAL)
        if write_header:
            writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([_csv_cell(row.get(col)) for col in CSV_COLUMNS])


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)
