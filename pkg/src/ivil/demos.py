"""Demonstration data: generation, the censored training view, history
windows, and trajectory-level K-fold partitions.

The training view of a demonstration set is *censored*: only states and
actions are visible, and any attempt to read the hidden confounders or the
reward raises :class:`~ivil.envs.CensorshipError`.  Training code calls
``demos.censor()`` defensively, so no trainer can depend on hidden fields
even by accident.

Windows
-------
A training window at time ``t`` (valid for ``t = L .. T``) is built from a
fixed look-back of ``L`` states with the ``L-1`` actions interleaved:

    regressor   x_t = (s_{t-L+1}, a_{t-L+1}, ..., a_{t-1}, s_t)
    instrument  z_t = the prefix of x_t ending at s_{t-k}
    target      y_t = a_t

so ``dim(x) - dim(z) = k * (dim(s) + dim(a))`` and the instrument is
literally a prefix slice of the regressor.  Windows with insufficient
history are dropped, not padded: padding would inject artificial
instrument values near episode starts, and the loss is at most ``L-1``
samples per trajectory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .approx import as_generator
from .envs import (CensorshipError, EnvSpec, InvalidConfigError, Trajectory,
                   rollout)

FORMAT_VERSION = 1


class EmptyWindowsError(ValueError):
    """No valid window fits the requested look-back."""


class CensoredTrajectory:
    """State/action view of a trajectory; hidden fields raise on access."""

    __slots__ = ("s", "a", "episode_seed")

    def __init__(self, s: np.ndarray, a: np.ndarray, episode_seed: int):
        self.s = s
        self.a = a
        self.episode_seed = episode_seed

    def __len__(self) -> int:
        return self.s.shape[0]

    def _blocked(self, name):
        raise CensorshipError(f"{name} is censored in the training view")

    @property
    def uo(self):
        self._blocked("uo")

    @property
    def ueps(self):
        self._blocked("ueps")

    @property
    def r(self):
        self._blocked("r")


@dataclass(frozen=True)
class DemonstrationSet:
    """A batch of trajectories plus the environment they came from."""

    trajectories: list
    env_spec: EnvSpec
    censored: bool = False

    def __post_init__(self):
        if len(self.trajectories) < 1:
            raise InvalidConfigError("a demonstration set needs at least one trajectory")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_steps(self) -> int:
        return sum(len(tr) for tr in self.trajectories)

    def censor(self) -> "DemonstrationSet":
        if self.censored:
            return self
        view = [CensoredTrajectory(tr.s, tr.a, tr.episode_seed)
                for tr in self.trajectories]
        return DemonstrationSet(trajectories=view, env_spec=self.env_spec,
                                censored=True)


def generate_demonstrations(env_spec: EnvSpec, n_traj: int, T: int | None = None,
                            seed: int = 0) -> DemonstrationSet:
    """Expert trajectories under confounding; deterministic in ``seed``.

    Per-trajectory seeds are spawned from one SeedSequence, so trajectory i
    is reproducible from (seed, i) alone.
    """
    if n_traj < 1:
        raise InvalidConfigError("n_traj must be >= 1")
    if T is not None and T != env_spec.T:
        env_spec = EnvSpec.from_json({**env_spec.to_json(), "T": T})
    seeds = np.random.SeedSequence(int(seed)).generate_state(n_traj, dtype=np.uint64)
    trajectories = []
    for i, ep_seed in enumerate(seeds):
        try:
            trajectories.append(rollout(env_spec, "expert", int(ep_seed)))
        except Exception as e:
            raise RuntimeError(f"trajectory {i} failed: {e}") from e
    return DemonstrationSet(trajectories=trajectories, env_spec=env_spec)


# --- windows -----------------------------------------------------------------


@dataclass(frozen=True)
class WindowLayout:
    """Index bookkeeping for interleaved (s, a, ..., s) windows."""

    ds: int
    da: int
    L: int
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise InvalidConfigError("k must be >= 1")
        if self.L < self.k + 1:
            raise InvalidConfigError("look-back L must be >= k + 1")

    @property
    def x_dim(self) -> int:
        return self.L * self.ds + (self.L - 1) * self.da

    @property
    def z_dim(self) -> int:
        n = self.L - self.k
        return n * self.ds + (n - 1) * self.da

    @property
    def m_dim(self) -> int:
        """Rollout-model output: the k missing (a, s) pairs plus the target action."""
        return self.k * (self.ds + self.da) + self.da

    @property
    def s_t_slice(self) -> slice:
        """Location of the current state inside the regressor."""
        return slice(self.x_dim - self.ds, self.x_dim)

    def state_slot(self, i: int) -> slice:
        """Location of the i-th state (0-based from the window start)."""
        start = i * (self.ds + self.da)
        return slice(start, start + self.ds)

    def action_slot(self, i: int) -> slice:
        start = i * (self.ds + self.da) + self.ds
        return slice(start, start + self.da)


@dataclass(frozen=True)
class HistoryWindow:
    """One training tuple: instrument prefix, full regressor, target action."""

    instrument: np.ndarray
    regressor: np.ndarray
    target: np.ndarray
    t: int


@dataclass(frozen=True)
class WindowSet:
    """Column-stacked windows from a demonstration set.

    ``uo`` is carried only when the source set was uncensored; diagnostic
    code uses it to evaluate the expert at window times.
    """

    instrument: np.ndarray     # (n, z_dim)
    regressor: np.ndarray      # (n, x_dim)
    target: np.ndarray         # (n, da)
    t: np.ndarray              # (n,) 1-indexed window time
    traj: np.ndarray           # (n,) source trajectory index
    layout: WindowLayout
    env_spec: EnvSpec
    uo: np.ndarray | None = None

    def __len__(self) -> int:
        return self.target.shape[0]

    def __getitem__(self, i: int) -> HistoryWindow:
        return HistoryWindow(instrument=self.instrument[i],
                             regressor=self.regressor[i],
                             target=self.target[i], t=int(self.t[i]))

    def subset(self, mask_or_idx) -> "WindowSet":
        idx = np.asarray(mask_or_idx)
        return WindowSet(instrument=self.instrument[idx],
                         regressor=self.regressor[idx],
                         target=self.target[idx], t=self.t[idx],
                         traj=self.traj[idx], layout=self.layout,
                         env_spec=self.env_spec,
                         uo=None if self.uo is None else self.uo[idx])

    def for_trajectories(self, traj_ids) -> "WindowSet":
        return self.subset(np.isin(self.traj, np.asarray(traj_ids)))


def _window_matrix(s: np.ndarray, a: np.ndarray, layout: WindowLayout) -> np.ndarray:
    """All regressor rows of one trajectory as an (n_w, x_dim) matrix."""
    T = s.shape[0]
    L = layout.L
    n_w = T - L + 1
    X = np.empty((n_w, layout.x_dim))
    base = np.arange(n_w)
    for i in range(L):
        X[:, layout.state_slot(i)] = s[base + i]
        if i < L - 1:
            X[:, layout.action_slot(i)] = a[base + i]
    return X


def extract_windows(demos: DemonstrationSet, k: int, L: int) -> WindowSet:
    """One window per valid t per trajectory; windows with t < L are dropped."""
    ds, da = demos.env_spec.state_dim, demos.env_spec.action_dim
    layout = WindowLayout(ds=ds, da=da, L=L, k=k)
    T = len(demos.trajectories[0])
    if L > T:
        raise EmptyWindowsError(f"look-back L={L} exceeds trajectory length T={T}")
    xs, ys, ts, trs, uos = [], [], [], [], []
    for j, tr in enumerate(demos.trajectories):
        X = _window_matrix(np.asarray(tr.s), np.asarray(tr.a), layout)
        n_w = X.shape[0]
        xs.append(X)
        ys.append(np.asarray(tr.a)[L - 1:])
        ts.append(np.arange(L, len(tr) + 1))
        trs.append(np.full(n_w, j))
        if not demos.censored:
            uos.append(np.asarray(tr.uo)[L - 1:])
    return WindowSet(
        instrument=np.concatenate(xs)[:, :layout.z_dim],
        regressor=np.concatenate(xs),
        target=np.concatenate(ys),
        t=np.concatenate(ts),
        traj=np.concatenate(trs),
        layout=layout,
        env_spec=demos.env_spec,
        uo=np.concatenate(uos) if uos else None,
    )


def kfold_partition(demos, K: int, seed=0) -> list[np.ndarray]:
    """Disjoint, exhaustive trajectory folds with sizes differing by <= 1.

    Partitioning is always by trajectory, never by step, so folds are
    independent episodes.
    """
    n = len(demos) if not isinstance(demos, (int, np.integer)) else int(demos)
    if K < 1 or K > n:
        raise InvalidConfigError(f"need 1 <= K <= {n} trajectories, got K={K}")
    order = as_generator(seed).permutation(n)
    return [np.sort(fold) for fold in np.array_split(order, K)]


# --- serialization -----------------------------------------------------------


def save_jsonl(path, demos: DemonstrationSet) -> None:
    """One header line (env spec, format version), then one trajectory per line."""
    with open(path, "w") as f:
        header = {"format_version": FORMAT_VERSION,
                  "env_spec": demos.env_spec.to_json(),
                  "censored": demos.censored,
                  "n_traj": len(demos)}
        f.write(json.dumps(header) + "\n")
        for tr in demos.trajectories:
            steps = []
            for i in range(len(tr)):
                step = {"s": tr.s[i].tolist(), "a": tr.a[i].tolist()}
                if not demos.censored:
                    step["uo"] = float(tr.uo[i])
                    step["ueps"] = float(tr.ueps[i])
                    step["r"] = float(tr.r[i])
                steps.append(step)
            f.write(json.dumps({"episode_seed": int(tr.episode_seed),
                                "steps": steps}) + "\n")


def load_jsonl(path) -> DemonstrationSet:
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError("unsupported demonstration format version")
        spec = EnvSpec.from_json(header["env_spec"])
        censored = header["censored"]
        trajectories = []
        for line in f:
            rec = json.loads(line)
            steps = rec["steps"]
            s = np.asarray([st["s"] for st in steps], dtype=np.float64)
            a = np.asarray([st["a"] for st in steps], dtype=np.float64)
            if censored:
                trajectories.append(
                    CensoredTrajectory(s, a, rec["episode_seed"]))
            else:
                trajectories.append(Trajectory(
                    s=s, a=a,
                    uo=np.asarray([st["uo"] for st in steps]),
                    ueps=np.asarray([st["ueps"] for st in steps]),
                    r=np.asarray([st["r"] for st in steps]),
                    episode_seed=rec["episode_seed"]))
    return DemonstrationSet(trajectories=trajectories, env_spec=spec,
                            censored=censored)
