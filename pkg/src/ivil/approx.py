"""Function approximators with hand-written reverse-mode gradients.

Everything here is plain float64 NumPy: a two-hidden-layer ReLU regressor
(``Mlp``), a Gaussian mixture-density head on the same trunk
(``MixtureDensity``), and a decoupled-weight-decay Adam optimizer
(``AdamW``).  Gradients are derived by hand so they can be checked against
central finite differences to tight tolerances; there is no autodiff
framework underneath.

Conventions
-----------
- Batches are row-major: ``X`` has shape ``(B, in_dim)``.
- The regression loss is the batch mean of the squared error *vector norm*,
  ``mean_b ||y_b - f(x_b)||^2``.
- Mixture log-stds are clamped to ``[LOGSTD_MIN, LOGSTD_MAX]`` so the
  likelihood cannot blow up on near-deterministic targets.
- Weight init is uniform on ``[-1/sqrt(fan_in), +1/sqrt(fan_in)]`` from the
  caller-supplied generator, which makes training bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOGSTD_MIN = -7.0
LOGSTD_MAX = 2.0

_LOG_2PI = float(np.log(2.0 * np.pi))


class NumericalError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


def as_generator(seed) -> np.random.Generator:
    """Accept an int seed, a SeedSequence, or a Generator and return a Generator.

    The bit generator is Philox (counter based); the stream consumed by a
    given seed is part of the artifact's reproducibility contract.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def spawn_seeds(seed, n: int) -> list[np.random.SeedSequence]:
    """Derive ``n`` independent child seeds from ``seed`` deterministically."""
    if isinstance(seed, np.random.SeedSequence):
        return seed.spawn(n)
    return np.random.SeedSequence(int(seed)).spawn(n)


@dataclass
class Standardizer:
    """Per-coordinate affine scaler (mean 0 / std 1 on the fitting set)."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        std = np.maximum(std, 1e-8)
        return cls(mean=mean, std=std)

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(mean=np.zeros(dim), std=np.ones(dim))

    @classmethod
    def concat(cls, parts: Sequence["Standardizer"]) -> "Standardizer":
        return cls(
            mean=np.concatenate([p.mean for p in parts]),
            std=np.concatenate([p.std for p in parts]),
        )

    def slice(self, sl: slice) -> "Standardizer":
        return Standardizer(mean=self.mean[sl], std=self.std[sl])

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(mean=np.asarray(d["mean"], dtype=np.float64),
                   std=np.asarray(d["std"], dtype=np.float64))


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=fan_out)
    return W, b


def _check_finite_loss(loss: float, per_sample: np.ndarray) -> None:
    if not np.isfinite(loss):
        bad = np.flatnonzero(~np.isfinite(per_sample))
        idx = int(bad[0]) if bad.size else -1
        raise NumericalError(f"non-finite loss (first offending sample index {idx})")


class Mlp:
    """Two-hidden-layer ReLU network, trained by exact batch gradients."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng):
        rng = as_generator(rng)
        self.in_dim, self.hidden, self.out_dim = in_dim, hidden, out_dim
        self.W1, self.b1 = _init_linear(rng, in_dim, hidden)
        self.W2, self.b2 = _init_linear(rng, hidden, hidden)
        self.W3, self.b3 = _init_linear(rng, hidden, out_dim)

    @property
    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2, self.W3, self.b3]

    def set_params(self, arrays: Sequence[np.ndarray]) -> None:
        self.W1, self.b1, self.W2, self.b2, self.W3, self.b3 = [
            np.asarray(a, dtype=np.float64).reshape(p.shape)
            for a, p in zip(arrays, self.params)
        ]

    def forward(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {X.shape[1]}")
        h1 = np.maximum(X @ self.W1 + self.b1, 0.0)
        h2 = np.maximum(h1 @ self.W2 + self.b2, 0.0)
        return h2 @ self.W3 + self.b3

    def _forward_cached(self, X: np.ndarray):
        z1 = X @ self.W1 + self.b1
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ self.W2 + self.b2
        h2 = np.maximum(z2, 0.0)
        out = h2 @ self.W3 + self.b3
        return out, (X, z1, h1, z2, h2)

    def _backward(self, cache, d_out: np.ndarray) -> list[np.ndarray]:
        X, z1, h1, z2, h2 = cache
        dW3 = h2.T @ d_out
        db3 = d_out.sum(axis=0)
        dh2 = d_out @ self.W3.T
        dz2 = dh2 * (z2 > 0.0)
        dW2 = h1.T @ dz2
        db2 = dz2.sum(axis=0)
        dh1 = dz2 @ self.W2.T
        dz1 = dh1 * (z1 > 0.0)
        dW1 = X.T @ dz1
        db1 = dz1.sum(axis=0)
        return [dW1, db1, dW2, db2, dW3, db3]

    def loss_and_grad(self, X: np.ndarray, Y: np.ndarray):
        """Mean squared-error loss over the batch and its exact gradient."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        if X.shape[0] == 0:
            raise ValueError("empty batch")
        out, cache = self._forward_cached(X)
        err = out - Y
        per_sample = (err ** 2).sum(axis=1)
        loss = float(per_sample.mean())
        _check_finite_loss(loss, per_sample)
        d_out = 2.0 * err / X.shape[0]
        return loss, self._backward(cache, d_out)


class MixtureDensity:
    """Diagonal Gaussian mixture head on a two-hidden-layer ReLU trunk.

    The trunk maps the conditioning input to a hidden code; three linear
    heads emit component logits, means, and raw log-stds (clamped).
    """

    def __init__(self, in_dim: int, hidden: int, out_dim: int,
                 n_components: int, rng):
        rng = as_generator(rng)
        self.in_dim, self.hidden = in_dim, hidden
        self.out_dim, self.n_components = out_dim, n_components
        self.W1, self.b1 = _init_linear(rng, in_dim, hidden)
        self.W2, self.b2 = _init_linear(rng, hidden, hidden)
        self.Wl, self.bl = _init_linear(rng, hidden, n_components)
        self.Wm, self.bm = _init_linear(rng, hidden, n_components * out_dim)
        self.Ws, self.bs = _init_linear(rng, hidden, n_components * out_dim)

    @property
    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2,
                self.Wl, self.bl, self.Wm, self.bm, self.Ws, self.bs]

    def set_params(self, arrays: Sequence[np.ndarray]) -> None:
        names = ["W1", "b1", "W2", "b2", "Wl", "bl", "Wm", "bm", "Ws", "bs"]
        for name, a, p in zip(names, arrays, self.params):
            setattr(self, name, np.asarray(a, dtype=np.float64).reshape(p.shape))

    def _trunk(self, X: np.ndarray):
        z1 = X @ self.W1 + self.b1
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ self.W2 + self.b2
        h2 = np.maximum(z2, 0.0)
        return z1, h1, z2, h2

    def _heads(self, h2: np.ndarray):
        B = h2.shape[0]
        C, D = self.n_components, self.out_dim
        logits = h2 @ self.Wl + self.bl
        mu = (h2 @ self.Wm + self.bm).reshape(B, C, D)
        raw = (h2 @ self.Ws + self.bs).reshape(B, C, D)
        logstd = np.clip(raw, LOGSTD_MIN, LOGSTD_MAX)
        return logits, mu, raw, logstd

    def loglik(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        """Per-sample log density ``log p(y | x)`` with log-sum-exp stabilization."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        _, _, _, h2 = self._trunk(X)
        logits, mu, _, logstd = self._heads(h2)
        return self._joint_ll(logits, mu, logstd, Y)[0]

    @staticmethod
    def _joint_ll(logits, mu, logstd, Y):
        log_w = logits - _logsumexp(logits, axis=1, keepdims=True)
        inv_var = np.exp(-2.0 * logstd)
        diff = Y[:, None, :] - mu
        quad = diff * diff * inv_var
        comp = -0.5 * quad.sum(axis=2) - logstd.sum(axis=2) \
            - 0.5 * mu.shape[2] * _LOG_2PI
        joint = log_w + comp
        ll = _logsumexp(joint, axis=1)
        return ll, (log_w, joint, diff, inv_var, quad)

    def loss_and_grad(self, X: np.ndarray, Y: np.ndarray):
        """Mean negative log-likelihood and its exact gradient."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        if X.shape[0] == 0:
            raise ValueError("empty batch")
        B = X.shape[0]
        C, D = self.n_components, self.out_dim

        z1, h1, z2, h2 = self._trunk(X)
        logits, mu, raw, logstd = self._heads(h2)
        ll, (log_w, joint, diff, inv_var, quad) = self._joint_ll(logits, mu, logstd, Y)
        loss = float(-ll.mean())
        _check_finite_loss(loss, -ll)

        # d(-mean ll)/d joint_c = -resp_c / B, with responsibilities
        # resp = softmax over components of the joint log terms.
        resp = np.exp(joint - ll[:, None])
        G = -resp / B                              # (B, C)

        # logits head: log_w_c = logits_c - LSE(logits)
        w = np.exp(log_w)
        d_logits = G - w * G.sum(axis=1, keepdims=True)

        # mean head: d comp / d mu = diff * inv_var
        d_mu = G[:, :, None] * diff * inv_var     # (B, C, D)

        # log-std head (through the clamp): d comp / d logstd = quad - 1
        gate = (raw > LOGSTD_MIN) & (raw < LOGSTD_MAX)
        d_raw = G[:, :, None] * (quad - 1.0) * gate

        dWl = h2.T @ d_logits
        dbl = d_logits.sum(axis=0)
        d_mu_flat = d_mu.reshape(B, C * D)
        dWm = h2.T @ d_mu_flat
        dbm = d_mu_flat.sum(axis=0)
        d_raw_flat = d_raw.reshape(B, C * D)
        dWs = h2.T @ d_raw_flat
        dbs = d_raw_flat.sum(axis=0)

        dh2 = d_logits @ self.Wl.T + d_mu_flat @ self.Wm.T + d_raw_flat @ self.Ws.T
        dz2 = dh2 * (z2 > 0.0)
        dW2 = h1.T @ dz2
        db2 = dz2.sum(axis=0)
        dh1 = dz2 @ self.W2.T
        dz1 = dh1 * (z1 > 0.0)
        dW1 = X.T @ dz1
        db1 = dz1.sum(axis=0)

        grads = [dW1, db1, dW2, db2, dWl, dbl, dWm, dbm, dWs, dbs]
        return loss, grads

    def sample(self, X: np.ndarray, rng) -> np.ndarray:
        """Draw one y per row of X: categorical component, then diagonal Gaussian."""
        rng = as_generator(rng)
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        _, _, _, h2 = self._trunk(X)
        logits, mu, _, logstd = self._heads(h2)
        log_w = logits - _logsumexp(logits, axis=1, keepdims=True)
        w = np.exp(log_w)
        cum = np.cumsum(w, axis=1)
        u = rng.random(X.shape[0])
        comp = (u[:, None] > cum).sum(axis=1)
        comp = np.minimum(comp, self.n_components - 1)
        rows = np.arange(X.shape[0])
        sel_mu = mu[rows, comp]
        sel_std = np.exp(logstd[rows, comp])
        return sel_mu + sel_std * rng.standard_normal(sel_mu.shape)

    def conditional_mean(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        _, _, _, h2 = self._trunk(X)
        logits, mu, _, _ = self._heads(h2)
        w = np.exp(logits - _logsumexp(logits, axis=1, keepdims=True))
        return (w[:, :, None] * mu).sum(axis=1)


def _logsumexp(a: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


class AdamW:
    """Adam with decoupled weight decay.

    The decay multiplies parameters by ``(1 - lr * weight_decay)`` before the
    moment-based step, so a zero gradient with nonzero decay still shrinks
    the weights.
    """

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-4,
                 weight_decay: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
             lr_scale: float = 1.0) -> None:
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in parameter block {i}; step rejected")
        self.t += 1
        lr = self.lr * lr_scale
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


@dataclass
class TrainConfig:
    """Hyperparameters shared by all trainers.

    ``hidden=256, epochs=150, lr=1e-4`` is the full-scale profile;
    ``hidden=64, epochs=50, lr=1e-3`` with cosine decay is the desk-scale
    profile used by the test suite (see ``runner.PROFILES``).  The cosine
    schedule anneals the step size to zero over the run, which removes the
    minibatch dithering a short fixed-rate run would leave in the weights.
    """

    hidden: int = 256
    epochs: int = 150
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 64
    n_components: int = 5
    samples_per_instrument: int = 8
    stage2_pairing: str = "independent"  # "independent" | "joint"
    lr_schedule: str = "constant"  # "constant" | "cosine"

    def lr_scale(self, step: int, total_steps: int) -> float:
        if self.lr_schedule == "constant":
            return 1.0
        if self.lr_schedule == "cosine":
            frac = min(step / max(total_steps, 1), 1.0)
            return 0.5 * (1.0 + float(np.cos(np.pi * frac)))
        raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        return {
            "hidden": self.hidden, "epochs": self.epochs, "lr": self.lr,
            "weight_decay": self.weight_decay, "batch_size": self.batch_size,
            "n_components": self.n_components,
            "samples_per_instrument": self.samples_per_instrument,
            "stage2_pairing": self.stage2_pairing,
            "lr_schedule": self.lr_schedule,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def fit_regressor(mlp: Mlp, X: np.ndarray, Y: np.ndarray,
                  cfg: TrainConfig, rng) -> list[float]:
    """Minibatch AdamW on the mean squared error; returns per-epoch losses."""
    rng = as_generator(rng)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    opt = AdamW(mlp.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    n_batches = -(-X.shape[0] // cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    trace, step = [], 0
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _epoch_batches(X.shape[0], cfg.batch_size, rng):
            try:
                loss, grads = mlp.loss_and_grad(X[idx], Y[idx])
            except NumericalError as e:
                raise NumericalError(f"epoch {epoch}: {e}") from e
            opt.step(mlp.params, grads, lr_scale=cfg.lr_scale(step, total_steps))
            step += 1
            total += loss * idx.size
            count += idx.size
        trace.append(total / count)
    return trace


def fit_density(mdn: MixtureDensity, X: np.ndarray, Y: np.ndarray,
                cfg: TrainConfig, rng) -> list[float]:
    """Minibatch AdamW on the negative log-likelihood; returns per-epoch NLL."""
    rng = as_generator(rng)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    opt = AdamW(mdn.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    n_batches = -(-X.shape[0] // cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    trace, step = [], 0
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for batch_no, idx in enumerate(_epoch_batches(X.shape[0], cfg.batch_size, rng)):
            try:
                loss, grads = mdn.loss_and_grad(X[idx], Y[idx])
            except NumericalError as e:
                raise NumericalError(f"epoch {epoch} batch {batch_no}: {e}") from e
            opt.step(mdn.params, grads, lr_scale=cfg.lr_scale(step, total_steps))
            step += 1
            total += loss * idx.size
            count += idx.size
        trace.append(total / count)
    return trace


def finite_difference_gradient(loss_fn: Callable[[], float],
                               params: Sequence[np.ndarray],
                               h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of ``loss_fn()`` w.r.t. ``params`` in place.

    Intended for small models only; cost is two evaluations per coordinate.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat_p = p.ravel()
        flat_g = g.ravel()
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = loss_fn()
            flat_p[i] = orig - h
            down = loss_fn()
            flat_p[i] = orig
            flat_g[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic: Sequence[np.ndarray],
                       numeric: Sequence[np.ndarray],
                       floor: float = 1e-6) -> float:
    """Worst per-coordinate relative error; the floor guards near-zero coords."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# --- checkpoint serialization -------------------------------------------------

CHECKPOINT_VERSION = 1


def _model_state(model) -> dict:
    if isinstance(model, Mlp):
        return {"kind": "mlp",
                "dims": [model.in_dim, model.hidden, model.out_dim]}
    if isinstance(model, MixtureDensity):
        return {"kind": "mdn",
                "dims": [model.in_dim, model.hidden, model.out_dim,
                         model.n_components]}
    raise TypeError(f"cannot checkpoint {type(model)!r}")


def save_checkpoint(path, model, scalers: dict | None = None,
                    meta: dict | None = None) -> None:
    """Write a self-describing JSON checkpoint (shapes + flat float64 params)."""
    state = _model_state(model)
    state["format_version"] = CHECKPOINT_VERSION
    state["shapes"] = [list(p.shape) for p in model.params]
    state["flat"] = np.concatenate([p.ravel() for p in model.params]).tolist()
    state["scalers"] = {k: v.to_dict() for k, v in (scalers or {}).items()}
    state["meta"] = meta or {}
    with open(path, "w") as f:
        json.dump(state, f)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns (model, scalers, meta)."""
    with open(path) as f:
        state = json.load(f)
    if state.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {state.get('format_version')!r}")
    dims = state["dims"]
    if state["kind"] == "mlp":
        model = Mlp(dims[0], dims[1], dims[2], rng=0)
    elif state["kind"] == "mdn":
        model = MixtureDensity(dims[0], dims[1], dims[2], dims[3], rng=0)
    else:
        raise ValueError(f"unknown checkpoint kind {state['kind']!r}")
    flat = np.asarray(state["flat"], dtype=np.float64)
    arrays, pos = [], 0
    for shape in state["shapes"]:
        size = int(np.prod(shape)) if shape else 1
        arrays.append(flat[pos:pos + size].reshape(shape))
        pos += size
    model.set_params(arrays)
    scalers = {k: Standardizer.from_dict(v) for k, v in state["scalers"].items()}
    return model, scalers, state["meta"]
