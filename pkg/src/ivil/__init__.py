"""Imitation learning under hidden confounding.

Synthetic confounded environments, history-instrumented two-stage policy
training with K-fold cross-fitting, plain and state-only baselines,
closed-form Gaussian conditioning oracles, and a config-driven runner.
"""

from .approx import (AdamW, MixtureDensity, Mlp, NumericalError, Standardizer,
                     TrainConfig, fit_density, fit_regressor, load_checkpoint,
                     save_checkpoint)
from .baselines import train_bc, train_bc_seq, train_iv_residual
from .cmr import (CmrDiagnostics, HistoryPolicy, RolloutModel, StatePolicy,
                  cmr_error, dml_il_train, fit_policy_stage2,
                  fit_rollout_model, gap_bound_diagnostic, ill_posedness_lb,
                  select_horizon, tv_shifted_gaussian, tv_stability_constant)
from .demos import (DemonstrationSet, HistoryWindow, WindowLayout, WindowSet,
                    extract_windows, generate_demonstrations, kfold_partition,
                    load_jsonl, save_jsonl)
from .envs import (ConfounderState, DivergedEpisodeError, EnvSpec,
                   InvalidConfigError, StepRecord, Trajectory,
                   confounder_step, expert_action, linear_gaussian_rollout,
                   plane_rollout, plane_ticket_step, random_policy, rollout)
from .evaluate import (EvalReport, RewardAnchors, evaluate_policy, gap_report,
                       misspecification_sweep, reward_anchors, spearman,
                       write_csv)
from .gaussian import LinearGaussianSystem, tv_zero_mean_gaussians
from .runner import ExperimentConfig, PROFILES, diagnose, main, run_experiment

__version__ = "0.1.0"
