"""Run configuration: one flat JSON object, validated, with a content hash."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

THREADS_ENV = "MMQRL_THREADS"


class ConfigError(ValueError):
    """Invalid or unknown configuration values."""


@dataclass
class RunConfig:
    env: str = "plane"
    seed: int = 0
    # dataset: an existing database file, or the synthetic generator
    db_path: str | None = None
    data_seed: int = 1
    data_minutes: float = 10.0
    # PPO
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 10
    minibatch: int = 64
    lr: float = 3e-4
    steps_per_iter: int = 4000
    workers: int = 11
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    normalize_obs: bool = False
    total_steps: int = 1_000_000
    checkpoint_every: int = 10
    checkpoint_steps: list[int] = field(default_factory=lambda: [100_000, 1_000_000, 2_000_000, 3_000_000])
    # plane
    max_steps: int = 300
    goal_half_extent: float = 5.0
    plane_success_bonus: float = 1000.0
    success_radius: float = 0.5
    # obstacles
    start_stage: int = 0
    curriculum: bool = True
    curriculum_window: int = 100
    curriculum_threshold: float = 0.4
    hit_reward: bool = True
    n_obstacles: int = 100
    collision_radius: float = 0.3
    obstacle_success_bonus: float = 10.0
    safety_cap: int = 1000

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.env not in ("plane", "obstacles"):
            raise ConfigError(f"env must be 'plane' or 'obstacles', got {self.env!r}")
        positive = ["data_minutes", "gamma", "clip", "epochs", "minibatch", "lr", "steps_per_iter", "workers",
                    "total_steps", "checkpoint_every", "max_steps", "goal_half_extent", "success_radius",
                    "curriculum_window", "n_obstacles", "collision_radius", "safety_cap"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("gamma", "lam", "curriculum_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.entropy_coef < 0 or self.value_coef < 0:
            raise ConfigError("loss coefficients must be non-negative")
        if not 0 <= self.start_stage <= 9:
            raise ConfigError("start_stage must lie in [0, 9]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @property
    def sha256(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)

    def replace(self, **changes) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **changes})


def thread_cap() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return n


def resolve(config: RunConfig) -> RunConfig:
    """Apply environment overrides (the worker cap) to get the config actually run."""
    cap = thread_cap()
    if cap is not None and config.workers > cap:
        return config.replace(workers=cap)
    return config
