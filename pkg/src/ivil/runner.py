"""Config-driven experiment runner.

An experiment file is a single JSON object validated against
``CONFIG_SCHEMA``.  Profiles bundle the two standard scales:

    paper_defaults  40 trajectories x 500 steps, hidden 256, 150 epochs,
                    lr 1e-4 (constant), 50 evaluation episodes
    desk            20 trajectories x 200 steps, hidden 64, 50 epochs,
                    lr 1e-3 with cosine decay, 20 evaluation episodes

Subcommands: ``run`` (train + evaluate per seed), ``sweep`` (cartesian
product over a horizon axis, methods, and seeds), ``diagnose`` (moment
error, gap bound, horizon selection), ``anchors`` (compute and cache the
reward anchors for an environment).

Every artifact filename is prefixed with the 8-hex config hash, so runs of
different configs never collide in one output directory.  All emitted
bytes are deterministic in (config, seed); wall-clock timings live only in
the manifest.  The CSV ``runtime_s`` column is left empty for that reason.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import datetime
import hashlib
import json
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .approx import TrainConfig, save_checkpoint
from .baselines import train_bc, train_bc_seq, train_iv_residual
from .cmr import cmr_error, dml_il_train, gap_bound_diagnostic, select_horizon
from .demos import extract_windows, generate_demonstrations
from .envs import EnvSpec, InvalidConfigError
from .evaluate import (CSV_COLUMNS, _anchor_seed, append_csv, evaluate_policy,
                       gap_report, reward_anchors, RewardAnchors)
from .gaussian import LinearGaussianSystem

METHODS = ("dml_il", "bc", "bc_seq", "iv_residual")

PROFILES = {
    "paper_defaults": {
        "n_traj": 40, "T": 500, "eval_episodes": 50, "anchor_episodes": 50,
        "train": {"hidden": 256, "epochs": 150, "lr": 1e-4,
                  "weight_decay": 1e-4, "batch_size": 64, "n_components": 5,
                  "samples_per_instrument": 8,
                  "stage2_pairing": "independent", "lr_schedule": "constant"},
    },
    "desk": {
        "n_traj": 20, "T": 200, "eval_episodes": 20, "anchor_episodes": 50,
        "train": {"hidden": 64, "epochs": 50, "lr": 1e-3,
                  "weight_decay": 1e-4, "batch_size": 64, "n_components": 5,
                  "samples_per_instrument": 8,
                  "stage2_pairing": "independent", "lr_schedule": "cosine"},
    },
}

_TRAIN_PROPS = {
    "hidden": {"type": "integer", "minimum": 1},
    "epochs": {"type": "integer", "minimum": 1},
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "weight_decay": {"type": "number", "minimum": 0},
    "batch_size": {"type": "integer", "minimum": 1},
    "n_components": {"type": "integer", "minimum": 1},
    "samples_per_instrument": {"type": "integer", "minimum": 1},
    "stage2_pairing": {"enum": ["independent", "joint"]},
    "lr_schedule": {"enum": ["constant", "cosine"]},
}

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["env", "method", "seeds"],
    "additionalProperties": False,
    "properties": {
        "env": {
            "type": "object",
            "required": ["env"],
            "additionalProperties": False,
            "properties": {
                "env": {"enum": ["plane_ticket", "linear_gaussian"]},
                "k": {"type": "integer", "minimum": 1},
                "T": {"type": "integer", "minimum": 2},
                "M": {"type": "integer", "minimum": 1},
                "noise_scale": {"type": "number"},
                "params": {"type": "object"},
            },
        },
        "method": {"enum": list(METHODS)},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "k_given": {"type": "integer", "minimum": 1},
        "lookback": {"type": "integer", "minimum": 2},
        "folds": {"type": "integer", "minimum": 1},
        "train": {"type": "object", "additionalProperties": False,
                  "properties": _TRAIN_PROPS},
        "n_traj": {"type": "integer", "minimum": 1},
        "eval_episodes": {"type": "integer", "minimum": 1},
        "anchor_episodes": {"type": "integer", "minimum": 1},
        "profile": {"enum": list(PROFILES)},
        "paper_defaults": {"type": "boolean"},
        "out": {"type": "string"},
        "sweep": {
            "type": "object",
            "required": ["axis", "values"],
            "additionalProperties": False,
            "properties": {
                "axis": {"enum": ["k", "k_given"]},
                "values": {"type": "array", "minItems": 1,
                           "items": {"type": "integer", "minimum": 1}},
                "methods": {"type": "array", "minItems": 1,
                            "items": {"enum": list(METHODS)}},
            },
        },
        "k_max": {"type": "integer", "minimum": 1},
        "significance": {"type": "number", "exclusiveMinimum": 0,
                         "exclusiveMaximum": 1},
    },
}


@dataclass
class ExperimentConfig:
    """Resolved experiment description (profile defaults already applied)."""

    env: EnvSpec
    method: str
    seeds: list
    k_given: int
    lookback: int
    folds: int
    train: TrainConfig
    n_traj: int
    eval_episodes: int
    anchor_episodes: int
    profile: str | None = None
    out: str = "runs"
    sweep: dict | None = None
    k_max: int | None = None
    significance: float = 0.05
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_json(cls, doc: dict, profile_override: str | None = None) -> "ExperimentConfig":
        try:
            jsonschema.validate(doc, CONFIG_SCHEMA)
        except jsonschema.ValidationError as e:
            path = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise InvalidConfigError(f"config field {path}: {e.message}") from e
        doc = dict(doc)
        profile = profile_override or doc.get("profile")
        if doc.get("paper_defaults"):
            profile = "paper_defaults"
        prof = PROFILES.get(profile, {})

        env_doc = dict(doc["env"])
        if "T" in prof and "T" not in env_doc:
            env_doc["T"] = prof["T"]
        env = EnvSpec.from_json(env_doc)

        train_doc = dict(prof.get("train", {}))
        train_doc.update(doc.get("train", {}))
        train = TrainConfig.from_dict(train_doc) if train_doc else TrainConfig()

        k_given = doc.get("k_given", env.k)
        lookback = doc.get("lookback", k_given + 3)
        cfg = cls(
            env=env, method=doc["method"], seeds=list(doc["seeds"]),
            k_given=k_given, lookback=lookback, folds=doc.get("folds", 1),
            train=train,
            n_traj=doc.get("n_traj", prof.get("n_traj", 20)),
            eval_episodes=doc.get("eval_episodes", prof.get("eval_episodes", 20)),
            anchor_episodes=doc.get("anchor_episodes", prof.get("anchor_episodes", 50)),
            profile=profile, out=doc.get("out", "runs"),
            sweep=doc.get("sweep"), k_max=doc.get("k_max"),
            significance=doc.get("significance", 0.05),
            raw=doc,
        )
        if cfg.lookback < cfg.k_given + 1:
            raise InvalidConfigError("lookback must be at least k_given + 1")
        return cfg

    def to_json(self) -> dict:
        out = {
            "env": self.env.to_json(), "method": self.method,
            "seeds": list(self.seeds), "k_given": self.k_given,
            "lookback": self.lookback, "folds": self.folds,
            "train": self.train.to_dict(), "n_traj": self.n_traj,
            "eval_episodes": self.eval_episodes,
            "anchor_episodes": self.anchor_episodes,
            "out": self.out, "significance": self.significance,
        }
        if self.profile:
            out["profile"] = self.profile
        if self.sweep:
            out["sweep"] = self.sweep
        if self.k_max is not None:
            out["k_max"] = self.k_max
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:8]


def _train_method(method: str, censored, k_given: int, folds: int,
                  train: TrainConfig, lookback: int, rng):
    if method == "dml_il":
        policy, _ = dml_il_train(censored, k=k_given, K=folds, cfg=train,
                                 rng=rng, L=lookback)
        return policy
    if method == "bc":
        return train_bc(censored, train, rng)
    if method == "bc_seq":
        return train_bc_seq(censored, lookback, train, rng)
    if method == "iv_residual":
        return train_iv_residual(censored, k=k_given, K=folds, cfg=train,
                                 rng=rng, L=lookback)
    raise InvalidConfigError(f"unknown method {method!r}")


def _cell_key(method: str, k_true: int, k_given: int, seed: int) -> tuple:
    return (method, k_true, k_given, seed)


def _run_cell(cfg: ExperimentConfig, method: str, env: EnvSpec, k_given: int,
              seed: int, anchors: RewardAnchors, out_dir: Path, prefix: str):
    """Train one method on one seed and evaluate it online; returns a CSV row."""
    t0 = time.monotonic()
    demo_seed, train_seed, eval_seed, aux_seed = \
        np.random.SeedSequence(int(seed)).generate_state(4)
    lookback = k_given + 3 if cfg.sweep else cfg.lookback
    demos = generate_demonstrations(env, cfg.n_traj, seed=int(demo_seed))
    censored = demos.censor()
    policy = _train_method(method, censored, k_given, cfg.folds, cfg.train,
                           lookback, int(train_seed))
    report = evaluate_policy(env, policy, cfg.eval_episodes, int(eval_seed),
                             anchors=anchors)

    # Moment error on held-out trajectories (never used for training).
    heldout = generate_demonstrations(env, max(4, cfg.n_traj // 5),
                                      seed=int(aux_seed)).censor()
    ws = extract_windows(heldout, k=k_given, L=lookback)
    eps = cmr_error(policy, ws, cfg.train, int(aux_seed) ^ 0x5EED).epsilon

    ckpt = out_dir / f"{prefix}_ckpt_{method}_k{env.k}_g{k_given}_s{seed}.json"
    scalers = ({"x": policy.x_scaler, "y": policy.y_scaler}
               if hasattr(policy, "x_scaler")
               else {"x": policy.s_scaler, "y": policy.y_scaler})
    save_checkpoint(ckpt, policy.mlp, scalers,
                    meta={"method": method, "k_true": env.k,
                          "k_given": k_given, "seed": seed,
                          "trained_with": policy.trained_with,
                          "config_hash": prefix})
    row = {
        "method": method, "env": env.env, "k_true": env.k,
        "k_given": k_given, "seed": seed,
        "avg_reward": report.avg_reward,
        "scaled_reward": report.scaled_reward,
        "action_mse": report.action_mse,
        "cmr_error": eps,
        "gap_bound": None, "gap_measured": None, "runtime_s": None,
    }
    return row, time.monotonic() - t0


def _anchors_cached(env: EnvSpec, episodes: int, out_dir: Path) -> RewardAnchors:
    env_hash = hashlib.sha256(
        json.dumps(env.to_json(), sort_keys=True).encode()).hexdigest()[:8]
    path = out_dir / f"anchors_{env_hash}_{episodes}.json"
    if path.exists():
        d = json.loads(path.read_text())
        return RewardAnchors(j_random=d["j_random"],
                             j_clean_expert=d["j_clean_expert"])
    anchors = reward_anchors(env, seed=_anchor_seed(env), episodes=episodes)
    path.write_text(json.dumps(anchors.to_json(), sort_keys=True))
    return anchors


def _cells_for(cfg: ExperimentConfig):
    """Canonically ordered (method, env, k_given, seed) work items."""
    if cfg.sweep:
        methods = cfg.sweep.get("methods", [cfg.method])
        cells = []
        for value in cfg.sweep["values"]:
            if cfg.sweep["axis"] == "k":
                env = EnvSpec.from_json({**cfg.env.to_json(), "k": value})
                k_given = value
            else:
                env = cfg.env
                k_given = value
                if not (1 <= k_given <= env.k):
                    raise InvalidConfigError(
                        "misspecified horizons must lie in [1, true k]")
            for method in methods:
                for seed in cfg.seeds:
                    cells.append((method, env, k_given, int(seed)))
        return cells
    return [(cfg.method, cfg.env, cfg.k_given, int(seed)) for seed in cfg.seeds]


def run_experiment(cfg: ExperimentConfig, resume: bool = False,
                   jobs: int = 1) -> dict:
    """Execute every cell, append CSV rows in canonical order, write manifest.

    A killed run can be resumed: completed rows are identified by their
    (method, k_true, k_given, seed) key and the remaining cells reproduce
    byte-identical rows.
    """
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    prefix = cfg.config_hash()
    csv_path = out_dir / f"{prefix}_results.csv"
    manifest_path = out_dir / f"{prefix}_manifest.json"

    done = set()
    if resume and csv_path.exists():
        import csv as _csv

        with open(csv_path, newline="") as f:
            for row in _csv.DictReader(f):
                done.add((row["method"], int(row["k_true"]),
                          int(row["k_given"]), int(row["seed"])))
    elif csv_path.exists() and not resume:
        csv_path.unlink()

    cells = _cells_for(cfg)
    pending = [c for c in cells
               if _cell_key(c[0], c[1].k, c[2], c[3]) not in done]

    anchor_envs = {}
    for _, env, _, _ in pending:
        anchor_envs[json.dumps(env.to_json(), sort_keys=True)] = env
    anchors = {key: _anchors_cached(env, cfg.anchor_episodes, out_dir)
               for key, env in anchor_envs.items()}

    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    results, failures, runtimes = {}, [], {}

    def work(cell):
        method, env, k_given, seed = cell
        key = json.dumps(env.to_json(), sort_keys=True)
        return _run_cell(cfg, method, env, k_given, seed, anchors[key],
                         out_dir, prefix)

    if jobs > 1 and len(pending) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = {pool.submit(work, cell): cell for cell in pending}
            for fut in concurrent.futures.as_completed(futs):
                cell = futs[fut]
                key = _cell_key(cell[0], cell[1].k, cell[2], cell[3])
                try:
                    row, rt = fut.result()
                    results[key] = row
                    runtimes[str(key)] = rt
                except Exception:
                    failures.append({"cell": list(key),
                                     "error": traceback.format_exc()})
    else:
        for cell in pending:
            key = _cell_key(cell[0], cell[1].k, cell[2], cell[3])
            try:
                row, rt = work(cell)
                results[key] = row
                runtimes[str(key)] = rt
            except Exception:
                failures.append({"cell": list(key),
                                 "error": traceback.format_exc()})

    # Rows land in canonical cell order regardless of execution order.
    new_rows = [results[_cell_key(c[0], c[1].k, c[2], c[3])]
                for c in cells
                if _cell_key(c[0], c[1].k, c[2], c[3]) in results]
    append_csv(csv_path, new_rows, write_header=not (resume and done))

    manifest = {
        "config_hash": prefix,
        "config": cfg.to_json(),
        "profile": cfg.profile,
        "started_at": started,
        "finished_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "rows_written": len(new_rows),
        "failures": failures,
        "cell_runtimes_s": runtimes,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return {"csv": str(csv_path), "manifest": str(manifest_path),
            "failures": len(failures)}


def diagnose(cfg: ExperimentConfig) -> dict:
    """Moment-error / gap-bound / horizon-selection report for one seed.

    The gap bound needs the closed-form conditioning oracle, so it is
    computed only on the linear-Gaussian environment; other environments
    get a partial report with a flag.
    """
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    prefix = cfg.config_hash()
    seed = int(cfg.seeds[0])
    demo_seed, train_seed, diag_seed, eval_seed = \
        np.random.SeedSequence(seed).generate_state(4)

    demos = generate_demonstrations(cfg.env, cfg.n_traj, seed=int(demo_seed))
    policy = _train_method(cfg.method, demos.censor(), cfg.k_given, cfg.folds,
                           cfg.train, cfg.lookback, int(train_seed))
    heldout = generate_demonstrations(cfg.env, max(4, cfg.n_traj // 2),
                                      seed=int(demo_seed) ^ 0xD1A6)
    ws = extract_windows(heldout, k=cfg.k_given, L=cfg.lookback)

    k_max = cfg.k_max or min(cfg.env.k + 1, cfg.env.T - 4)
    horizon = select_horizon(demos.censor(), k_max=k_max,
                             significance=cfg.significance,
                             rng=int(diag_seed))

    report: dict
    if cfg.env.env == "linear_gaussian":
        diag = gap_bound_diagnostic(policy, ws, cfg.train, int(diag_seed) ^ 0xB0,
                                    system=LinearGaussianSystem(cfg.env))
        diag.k_selected = horizon.k_hat
        diag.p_values = [horizon.p_values[k] for k in sorted(horizon.p_values)]
        report = gap_report(cfg.env, policy, diag, seed=int(eval_seed),
                            episodes=cfg.eval_episodes)
        report["horizon_failed"] = horizon.failed
    else:
        err = cmr_error(policy, ws, cfg.train, int(diag_seed) ^ 0xB0,
                        with_floor=True)
        report = {
            "cmr_error": err.epsilon, "cmr_noise_floor": err.noise_floor,
            "nu_lb": None, "nu_policy": None, "delta_hat": None, "c": None,
            "gap_bound": None, "gap_measured": None,
            "k_selected": horizon.k_hat,
            "p_values": [horizon.p_values[k] for k in sorted(horizon.p_values)],
            "horizon_failed": horizon.failed,
            "flags": {"bound_unsupported_env": True},
        }
    path = out_dir / f"{prefix}_diagnostics.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return {"diagnostics": str(path), "report": report}


def compute_anchors(cfg: ExperimentConfig) -> dict:
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    anchors = _anchors_cached(cfg.env, cfg.anchor_episodes, out_dir)
    return anchors.to_json()


def load_config(path, profile: str | None = None,
                seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    with open(path) as f:
        doc = json.load(f)
    if out is not None:
        doc["out"] = out
    if seed is not None:
        doc["seeds"] = [seed] + list(doc.get("seeds", []))[1:]
    return ExperimentConfig.from_json(doc, profile_override=profile)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ivil", description="confounded imitation-learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep", "diagnose", "anchors"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the first configured seed")
        p.add_argument("--profile", choices=list(PROFILES), default=None)
        p.add_argument("--resume", action="store_true")
        p.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, profile=args.profile, seed=args.seed,
                          out=args.out)
    except (InvalidConfigError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    try:
        if args.command in ("run", "sweep"):
            if args.command == "sweep" and not cfg.sweep:
                print("error: sweep command needs a 'sweep' block in the config",
                      file=sys.stderr)
                return 2
            outcome = run_experiment(cfg, resume=args.resume, jobs=args.jobs)
            print(json.dumps(outcome))
            return 1 if outcome["failures"] else 0
        if args.command == "diagnose":
            outcome = diagnose(cfg)
            print(json.dumps({"diagnostics": outcome["diagnostics"]}))
            return 0
        outcome = compute_anchors(cfg)
        print(json.dumps(outcome))
        return 0
    except InvalidConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
