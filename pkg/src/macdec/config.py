"""Configuration objects and their flat-JSON form."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

ALGORITHMS = (
    "dec_hddrqn",
    "cen_ddrqn",
    "macdec_maddrqn",
    "parallel_macdec_maddrqn",
    "macdec_maddrqn_regular_double_q",
)
EXPLORATION_MODES = ("centralized", "decentralized")


@dataclass(frozen=True)
class LearnerConfig:
    algorithm: str = "macdec_maddrqn"
    gamma: float = 0.98
    lr: float = 1e-3
    hysteretic_beta: float = 0.4
    batch_size: int = 16
    # dec-env boundaries between training iterations; 0 = once per finished episode
    train_interval: int = 0
    updates_per_train: int = 1
    # primitive steps between target-network refreshes
    target_update_steps: int = 5000
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_decay_fraction: float = 0.4
    exploration_mode: str = "centralized"
    conditional: bool = True
    plain_sum_gamma_power_1: bool = False
    dec_hidden: int = 32
    dec_lstm: int = 32
    cen_hidden: int = 32
    cen_lstm: int = 64
    buffer_capacity: int = 1000
    warmup_episodes: int = 16
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.exploration_mode not in EXPLORATION_MODES:
            raise ValueError(f"exploration_mode must be one of {EXPLORATION_MODES}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0.0 <= self.hysteretic_beta <= 1.0:
            raise ValueError("hysteretic_beta must be in [0, 1]")
        for name in ("eps_start", "eps_end", "eps_decay_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be within [0, 1]")
        if self.batch_size < 1 or self.updates_per_train < 1 or self.target_update_steps < 1:
            raise ValueError("batch_size, updates_per_train and target_update_steps must be >= 1")
        if self.train_interval < 0:
            raise ValueError("train_interval must be >= 0")

    def epsilon(self, episode: int, total_episodes: int) -> float:
        """Linear decay over the first ``eps_decay_fraction`` of training, then constant."""
        span = self.eps_decay_fraction * total_episodes
        if span <= 0 or episode >= span:
            return self.eps_end
        return self.eps_start + (self.eps_end - self.eps_start) * episode / span


# per-environment network sizes
NET_SIZES = {
    "bp10": dict(dec_hidden=32, dec_lstm=32, cen_hidden=32, cen_lstm=64),
    "bp30": dict(dec_hidden=32, dec_lstm=32, cen_hidden=32, cen_lstm=64),
    "wtd": dict(dec_hidden=32, dec_lstm=64, cen_hidden=32, cen_lstm=64),
}


@dataclass(frozen=True)
class TrainConfig:
    env: str = "bp10"
    env_horizon: int | None = None
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    num_runs: int = 1
    episodes: int = 1000
    eval_interval: int = 10
    eval_episodes: int = 1
    seed: int = 0
    out_dir: str = "runs"
    smoothing_window: int = 20
    # wall-clock seconds in the metrics CSVs make them differ between reruns
    record_wall_clock: bool = False

    def __post_init__(self):
        if self.num_runs < 1:
            raise ValueError("num_runs must be >= 1")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        if self.episodes < 1 or self.eval_episodes < 1:
            raise ValueError("episodes and eval_episodes must be >= 1")
        if self.smoothing_window < 1:
            raise ValueError("smoothing_window must be >= 1")

    @classmethod
    def default(cls, env: str = "bp10", **overrides) -> "TrainConfig":
        learner_kw = {k: overrides.pop(k) for k in list(overrides)
                      if k in {f.name for f in fields(LearnerConfig)}}
        learner = LearnerConfig(**{**NET_SIZES.get(env, {}), **learner_kw})
        return cls(env=env, learner=learner, **overrides)

    def with_learner(self, **kw) -> "TrainConfig":
        return replace(self, learner=replace(self.learner, **kw))

    def resolved_horizon(self) -> int:
        if self.env_horizon is not None:
            return self.env_horizon
        from .envs import make_env

        return make_env(self.env).spec.horizon

    def to_flat(self) -> dict:
        flat = {}
        for f in fields(self):
            if f.name == "learner":
                continue
            if f.name == "env_horizon":
                flat[f"{self.env}.horizon"] = self.resolved_horizon()
            else:
                flat[f.name] = getattr(self, f.name)
        for k, v in asdict(self.learner).items():
            flat[f"learner.{k}"] = v
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        flat = dict(flat)
        env = flat.get("env", "bp10")
        learner_kw = {}
        top = {}
        known_top = {f.name for f in fields(cls)} - {"learner", "env_horizon"}
        learner_names = {f.name for f in fields(LearnerConfig)}
        for k, v in flat.items():
            if k.startswith("learner."):
                name = k.split(".", 1)[1]
                if name not in learner_names:
                    raise ValueError(f"unknown learner key {k!r}")
                learner_kw[name] = v
            elif k == f"{env}.horizon":
                top["env_horizon"] = v
            elif k in known_top:
                top[k] = v
            elif "." in k:
                # horizon settings for environments other than the selected one
                continue
            else:
                raise ValueError(f"unknown config key {k!r}")
        learner = LearnerConfig(**{**NET_SIZES.get(env, {}), **learner_kw})
        return cls(learner=learner, **top)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_flat(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_flat(json.loads(Path(path).read_text()))
