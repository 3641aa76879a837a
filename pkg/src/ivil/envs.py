"""Confounded control environments with moving-average latent noise.

Two analytically specified environments share the same latent structure:
an expert-observable signal ``uo`` (seen by the demonstrator, never
recorded) and confounding noise ``ueps`` (seen by nobody) that corrupts
both the observed state and the executed action.  ``ueps`` is a moving
average of the last ``k`` i.i.d. draws, so values ``k`` steps apart are
independent while nearby values overlap; the per-draw std carries a
``sqrt(k)`` factor that keeps ``Var(ueps)`` constant in ``k``.

plane_ticket
    Scalar pricing task.  Profit ``s_t = sign(s_{t-1}) * uo_t - ueps_t``,
    expert price ``clip(-s_t / uo_t, -1, 1)``, executed price gets
    ``+ noise_scale * ueps_t``.  ``uo_t`` is a moving average of M uniform
    draws (slowly varying seasonal level).  The reward is
    ``r_t = -(s_t + uo_t * a_t)^2``: the unique quadratic under which the
    stated (unclipped) expert is optimal, since the task itself does not
    pin one down.  The state update ignores the action; instrument
    relevance flows through the slowly varying ``uo``.

linear_gaussian
    Jointly Gaussian AR system built so every conditional expectation of
    interest has a closed form (see :mod:`ivil.gaussian`).  ``uo`` is drawn
    once per episode; latent ``z_t = gamma*z_{t-1} + a_{t-1} + w_t``;
    observed ``s_t = z_t + c_s*ueps_t``; expert intends
    ``alpha*s_t + beta*uo`` and the executed action adds ``c_a*ueps_t``
    with ``c_a = noise_scale``.  Reward ``1 / (1 + (a - expert)^2)`` is
    bounded in (0, 1], which the gap diagnostic requires.

Reproducibility: each episode draws its noise in one documented order from
a Philox generator seeded per episode (init buffers, then blocked per-step
arrays), so identical seeds give identical trajectories bit for bit.
Environments are single-threaded state machines; concurrent episodes must
each own their generator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .approx import as_generator

UO_CLAMP = 1e-3          # division guard for the plane-ticket expert
Z_OVERFLOW = 1e6         # linear-Gaussian divergence guard


class InvalidConfigError(ValueError):
    """Environment or experiment configuration violates its contract."""


class DivergedEpisodeError(RuntimeError):
    """Latent state left the overflow guard during a rollout."""


class CensorshipError(AttributeError):
    """A hidden field (uo / ueps / r) was read from a censored record."""


# --- specs ---------------------------------------------------------------

_LG_DEFAULTS = {
    "alpha": 0.3, "beta": 1.0, "gamma": 0.2, "c_s": 0.5,
    "sigma_o": 1.0, "sigma_eps": 0.5, "sigma_w": 0.3,
    "action_low": -4.0, "action_high": 4.0,
}

ENV_NAMES = ("plane_ticket", "linear_gaussian")


@dataclass(frozen=True)
class EnvSpec:
    """JSON-serializable environment descriptor.

    ``{"env": ..., "k": ..., "T": ..., "M": ..., "noise_scale": ..., "params": {...}}``
    For the linear-Gaussian environment ``noise_scale`` is the action-noise
    coefficient ``c_a``.
    """

    env: str = "plane_ticket"
    k: int = 1
    T: int = 500
    M: int = 30
    noise_scale: float = 10.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.env not in ENV_NAMES:
            raise InvalidConfigError(f"unknown env {self.env!r}")
        if self.k < 1 or self.M < 1:
            raise InvalidConfigError("k and M must be >= 1")
        if self.T <= self.k:
            raise InvalidConfigError("episode length T must exceed the horizon k")

    @classmethod
    def make(cls, env: str = "plane_ticket", **kwargs) -> "EnvSpec":
        if env == "linear_gaussian":
            params = dict(_LG_DEFAULTS)
            params.update(kwargs.pop("params", {}))
            kwargs.setdefault("noise_scale", 1.0)
            kwargs.setdefault("T", 200)
            return cls(env=env, params=params, **kwargs)
        return cls(env=env, **kwargs)

    # Both environments are scalar; the window machinery stays dimension-generic.
    @property
    def state_dim(self) -> int:
        return 1

    @property
    def action_dim(self) -> int:
        return 1

    @property
    def ueps_draw_std(self) -> float:
        """Per-draw std of the ueps buffer; the sqrt(k) factor keeps Var(ueps) flat in k."""
        base = 0.1 if self.env == "plane_ticket" else self.params["sigma_eps"]
        return base * float(np.sqrt(self.k))

    @property
    def action_bounds(self) -> tuple[float, float]:
        if self.env == "plane_ticket":
            return (-1.0, 1.0)
        return (self.params["action_low"], self.params["action_high"])

    def to_json(self) -> dict:
        return {"env": self.env, "k": self.k, "T": self.T, "M": self.M,
                "noise_scale": self.noise_scale, "params": dict(self.params)}

    @classmethod
    def from_json(cls, d: dict) -> "EnvSpec":
        d = dict(d)
        env = d.pop("env", "plane_ticket")
        return cls.make(env=env, **d)


# --- confounder state machine ---------------------------------------------


class MovingAverage:
    """Fixed-size ring buffer; exactly one element is replaced per push (oldest out)."""

    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values, dtype=np.float64).copy()
        self._next = 0

    def push(self, x: float) -> None:
        self.values[self._next] = x
        self._next = (self._next + 1) % self.values.size

    @property
    def mean(self) -> float:
        return float(self.values.mean())


@dataclass
class ConfounderState:
    """Moving-average buffers generating ``uo`` and ``ueps`` each step."""

    uo_buffer: MovingAverage
    ueps_buffer: MovingAverage
    M: int
    k: int
    ueps_draw_std: float

    @classmethod
    def init(cls, spec: EnvSpec, rng) -> "ConfounderState":
        if spec.k < 1 or spec.M < 1:
            raise InvalidConfigError("k and M must be >= 1")
        rng = as_generator(rng)
        uo = MovingAverage(rng.uniform(-1.0, 1.0, size=spec.M))
        ueps = MovingAverage(rng.normal(0.0, spec.ueps_draw_std, size=spec.k))
        return cls(uo_buffer=uo, ueps_buffer=ueps, M=spec.M, k=spec.k,
                   ueps_draw_std=spec.ueps_draw_std)


def confounder_step(state: ConfounderState, rng) -> tuple[float, float]:
    """Advance both buffers by one draw and return their means ``(uo, ueps)``."""
    if state.k < 1 or state.M < 1:
        raise InvalidConfigError("k and M must be >= 1")
    rng = as_generator(rng)
    state.uo_buffer.push(float(rng.uniform(-1.0, 1.0)))
    state.ueps_buffer.push(float(rng.normal(0.0, state.ueps_draw_std)))
    return state.uo_buffer.mean, state.ueps_buffer.mean


# --- records ---------------------------------------------------------------


@dataclass(frozen=True)
class StepRecord:
    """One environment step with hidden fields (full view only)."""

    s: float
    a: float
    uo: float
    ueps: float
    r: float
    t: int


@dataclass(frozen=True)
class Trajectory:
    """A full episode; arrays are aligned along time (index 0 is t=1)."""

    s: np.ndarray          # (T, state_dim)
    a: np.ndarray          # (T, action_dim)
    uo: np.ndarray         # (T,)
    ueps: np.ndarray       # (T,)
    r: np.ndarray          # (T,)
    episode_seed: int

    def __post_init__(self):
        T = self.s.shape[0]
        if not (self.a.shape[0] == self.uo.shape[0] == self.ueps.shape[0]
                == self.r.shape[0] == T):
            raise ValueError("misaligned trajectory arrays")

    def __len__(self) -> int:
        return self.s.shape[0]

    def step(self, t: int) -> StepRecord:
        """1-indexed step accessor."""
        i = t - 1
        return StepRecord(s=float(self.s[i, 0]), a=float(self.a[i, 0]),
                          uo=float(self.uo[i]), ueps=float(self.ueps[i]),
                          r=float(self.r[i]), t=t)


# --- policies --------------------------------------------------------------


def _sign(x: float) -> float:
    """Sign with the convention sign(0) = +1."""
    return 1.0 if x >= 0.0 else -1.0


def _clamp_uo(uo):
    """Keep |uo| >= UO_CLAMP before dividing; preserves sign, sign(0) = +1."""
    uo = np.asarray(uo, dtype=np.float64)
    s = np.where(uo >= 0.0, 1.0, -1.0)
    return s * np.maximum(np.abs(uo), UO_CLAMP)


def _plane_expert(s, uo):
    """Clamped expert used inside the environment; total in uo."""
    return np.clip(-np.asarray(s, dtype=np.float64) / _clamp_uo(uo), -1.0, 1.0)


def expert_action(s, uo, spec: EnvSpec):
    """Deterministic expert; depends on (s, uo) only, never on ueps.

    The plane-ticket expert divides by uo; exact zero raises, and tiny
    magnitudes are clamped to UO_CLAMP before dividing (uo is a mean of M
    uniform draws, so exact zero has measure zero but floats need a guard).
    """
    if spec.env == "plane_ticket":
        if np.any(np.asarray(uo) == 0.0):
            raise ZeroDivisionError("plane-ticket expert undefined at uo == 0")
        return _plane_expert(s, uo)
    return spec.params["alpha"] * np.asarray(s, dtype=np.float64) \
        + spec.params["beta"] * np.asarray(uo, dtype=np.float64)


def random_policy(spec: EnvSpec, rng):
    """One action drawn uniformly over the environment's action bounds."""
    lo, hi = spec.action_bounds
    return float(as_generator(rng).uniform(lo, hi))


def plane_ticket_step(s_prev: float, a_prev: float, conf: ConfounderState,
                      rng, t: int = 1, noise_scale: float = 10.0,
                      spec: EnvSpec | None = None) -> StepRecord:
    """One expert step of the plane-ticket environment.

    ``sign(s)`` in the state update is read as ``sign(s_{t-1})`` with
    sign(0) = +1: only the prior state exists at transition time.
    """
    spec = spec or EnvSpec(env="plane_ticket", k=conf.k, M=conf.M,
                           noise_scale=noise_scale)
    uo, ueps = confounder_step(conf, rng)
    s = _sign(s_prev) * uo - ueps
    a = float(_plane_expert(s, uo)) + spec.noise_scale * ueps
    r = -(s + uo * a) ** 2
    return StepRecord(s=s, a=a, uo=uo, ueps=ueps, r=r, t=t)


# --- exogenous noise streams ------------------------------------------------
#
# All latent noise is exogenous (it never depends on actions), so an episode
# pre-draws its noise in one canonical order.  Rolling means come from
# cumulative sums over the concatenated init-buffer + fresh-draw stream.


def _rolling_mean(init: np.ndarray, fresh: np.ndarray, width: int) -> np.ndarray:
    stream = np.concatenate([init, fresh])
    c = np.concatenate([[0.0], np.cumsum(stream)])
    t = np.arange(1, fresh.size + 1)
    return (c[t + width] - c[t]) / width


def plane_noise(spec: EnvSpec, seed) -> tuple[np.ndarray, np.ndarray]:
    """Exogenous (uo_t, ueps_t) for one plane-ticket episode.

    Draw order: uo init buffer (M uniforms), ueps init buffer (k normals),
    uo fresh draws (T uniforms), ueps fresh draws (T normals).
    """
    rng = as_generator(seed)
    uo_init = rng.uniform(-1.0, 1.0, size=spec.M)
    ueps_init = rng.normal(0.0, spec.ueps_draw_std, size=spec.k)
    p = rng.uniform(-1.0, 1.0, size=spec.T)
    q = rng.normal(0.0, spec.ueps_draw_std, size=spec.T)
    uo = _rolling_mean(uo_init, p, spec.M)
    ueps = _rolling_mean(ueps_init, q, spec.k)
    return uo, ueps


def linear_gaussian_noise(spec: EnvSpec, seed):
    """Exogenous (uo, ueps_t, w_t) for one linear-Gaussian episode.

    Draw order: uo (one normal), ueps init buffer (k normals), ueps fresh
    draws (T normals), process noise (T normals).
    """
    rng = as_generator(seed)
    p = spec.params
    uo = float(rng.normal(0.0, p["sigma_o"]))
    ueps_init = rng.normal(0.0, spec.ueps_draw_std, size=spec.k)
    q = rng.normal(0.0, spec.ueps_draw_std, size=spec.T)
    w = rng.normal(0.0, p["sigma_w"], size=spec.T)
    ueps = _rolling_mean(ueps_init, q, spec.k)
    return uo, ueps, w


# --- rollouts ---------------------------------------------------------------
#
# ``policy`` is "expert", "random", or a callable mapping the current state
# (scalar) to an intended action; history policies are rolled out by
# ivil.evaluate, which maintains the window features.


def _intended_actions_policy(policy, spec: EnvSpec, rng):
    if policy == "random":
        lo, hi = spec.action_bounds
        draws = as_generator(rng).uniform(lo, hi, size=spec.T)
        return lambda t, s, uo: draws[t - 1]
    if policy == "expert":
        if spec.env == "plane_ticket":
            return lambda t, s, uo: float(_plane_expert(s, uo))
        return lambda t, s, uo: float(expert_action(s, uo, spec))
    if callable(policy):
        return lambda t, s, uo: float(policy(s))
    raise InvalidConfigError(f"unsupported policy {policy!r}")


def plane_rollout(spec: EnvSpec, policy, seed, noised: bool = True) -> Trajectory:
    """Roll one plane-ticket episode; ``noised=False`` forces ueps to zero."""
    seed_int = _seed_int(seed)
    uo, ueps = plane_noise(spec, seed_int)
    if not noised:
        ueps = np.zeros_like(ueps)
    act = _intended_actions_policy(policy, spec, _policy_rng(seed_int))
    T = spec.T
    s = np.empty(T)
    a = np.empty(T)
    r = np.empty(T)
    s_prev = 0.0
    for i in range(T):
        s[i] = _sign(s_prev) * uo[i] - ueps[i]
        a[i] = act(i + 1, s[i], uo[i]) + spec.noise_scale * ueps[i]
        r[i] = -(s[i] + uo[i] * a[i]) ** 2
        s_prev = s[i]
    return Trajectory(s=s[:, None], a=a[:, None], uo=uo, ueps=ueps, r=r,
                      episode_seed=seed_int)


def linear_gaussian_rollout(spec: EnvSpec, policy, seed,
                            noised: bool = True) -> Trajectory:
    """Roll one linear-Gaussian episode; raises DivergedEpisodeError on overflow."""
    seed_int = _seed_int(seed)
    uo_val, ueps, w = linear_gaussian_noise(spec, seed_int)
    if not noised:
        ueps = np.zeros_like(ueps)
    act = _intended_actions_policy(policy, spec, _policy_rng(seed_int))
    p = spec.params
    c_a = spec.noise_scale
    T = spec.T
    s = np.empty(T)
    a = np.empty(T)
    r = np.empty(T)
    z_prev, a_prev = 0.0, 0.0
    for i in range(T):
        z = p["gamma"] * z_prev + a_prev + w[i]
        if not np.isfinite(z) or abs(z) > Z_OVERFLOW:
            raise DivergedEpisodeError(f"latent state overflow at t={i + 1}")
        s[i] = z + p["c_s"] * ueps[i]
        intended = act(i + 1, s[i], uo_val)
        a[i] = intended + c_a * ueps[i]
        expert = p["alpha"] * s[i] + p["beta"] * uo_val
        r[i] = 1.0 / (1.0 + (a[i] - expert) ** 2)
        z_prev, a_prev = z, a[i]
    return Trajectory(s=s[:, None], a=a[:, None],
                      uo=np.full(T, uo_val), ueps=ueps, r=r,
                      episode_seed=seed_int)


def rollout(spec: EnvSpec, policy, seed, noised: bool = True) -> Trajectory:
    if spec.env == "plane_ticket":
        return plane_rollout(spec, policy, seed, noised=noised)
    return linear_gaussian_rollout(spec, policy, seed, noised=noised)


def _seed_int(seed) -> int:
    if isinstance(seed, np.random.SeedSequence):
        return int(seed.generate_state(1, dtype=np.uint64)[0])
    return int(seed)


def _policy_rng(seed_int: int) -> np.random.Generator:
    # Separate stream from the noise draws so policy randomness never
    # perturbs the environment's latent sequence.
    return as_generator(np.random.SeedSequence(entropy=seed_int, spawn_key=(1,)))
