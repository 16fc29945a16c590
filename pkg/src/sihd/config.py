"""Flat key-value configuration for the pipeline.

Configs load from simple ``key = value`` text files (# comments allowed) and
accept ``key=value`` override strings; unknown keys are rejected and every
value is range-checked up front.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields

from .validation import require


@dataclass
class Config:
    # environment / data synthesis
    grid_width: int = 8
    grid_height: int = 8
    walls_file: str = ""
    episodes: int = 200
    collector_noise: float = 0.3
    state_noise: float = 0.1
    goal_reward: float = 1.0
    # state graph
    dedupe_tol: float = 1e-9
    similarity: str = "rbf"
    k_min: int = 2
    k_max: int = 16
    # encoding tree
    max_height: int = 3
    # diffusion
    n_diffusion_steps: int = 20
    schedule: str = "cosine"
    guidance_weight: float = 0.1
    explore_coef: float = 0.0
    pad_length: int = 8
    p_uncond: float = 0.25
    refresh_every: int = 50
    kde_rollouts: int = 64
    train_steps: int = 3000
    batch_size: int = 32
    learning_rate: float = 2e-3
    ema_decay: float = 0.995
    hidden_width: int = 192
    blend: str = "input"
    # planning / evaluation
    goal_tolerance: float = 0.5
    horizon: int = 64
    eval_episodes: int = 10
    seeds: str = "0,1,2,3,4"
    seed: int = 0

    def validate(self):
        require(self.grid_width >= 2 and self.grid_height >= 2, "grid must be at least 2x2")
        require(self.episodes > 0, "episodes must be positive")
        require(0.0 <= self.collector_noise <= 1.0, "collector_noise must lie in [0, 1]")
        require(self.state_noise >= 0, "state_noise must be >= 0")
        require(self.dedupe_tol >= 0, "dedupe_tol must be >= 0")
        require(self.similarity in ("rbf", "cosine"), "similarity must be rbf|cosine")
        require(1 <= self.k_min <= self.k_max, "need 1 <= k_min <= k_max")
        require(self.max_height >= 2, "max_height must be >= 2 (the hierarchy needs "
                                      "at least a subgoal layer above the action layer)")
        require(self.n_diffusion_steps >= 2, "n_diffusion_steps must be >= 2")
        require(self.schedule in ("linear", "cosine"), "schedule must be linear|cosine")
        require(0.0 <= self.guidance_weight <= 1.0, "guidance_weight must lie in [0, 1]")
        require(self.explore_coef >= 0, "explore_coef must be >= 0")
        require(self.pad_length >= 4, "pad_length must be >= 4")
        require(0.0 <= self.p_uncond < 1.0, "p_uncond must lie in [0, 1)")
        require(self.refresh_every > 0, "refresh_every must be positive")
        require(self.kde_rollouts >= 2, "kde_rollouts must be >= 2")
        require(self.train_steps > 0, "train_steps must be positive")
        require(self.batch_size > 0, "batch_size must be positive")
        require(self.learning_rate > 0, "learning_rate must be positive")
        require(0.0 < self.ema_decay < 1.0, "ema_decay must lie in (0, 1)")
        require(self.hidden_width >= 4, "hidden_width must be >= 4")
        require(self.blend in ("input", "output"), "blend must be input|output")
        require(self.goal_tolerance > 0, "goal_tolerance must be positive")
        require(self.horizon >= 0, "horizon must be >= 0")
        require(self.eval_episodes >= 0, "eval_episodes must be >= 0")
        require(len(self.seed_list()) > 0, "at least one evaluation seed is required")
        return self

    def seed_list(self) -> list[int]:
        return [int(s) for s in str(self.seeds).split(",") if s.strip() != ""]

    def apply_overrides(self, overrides: list[str]) -> "Config":
        for item in overrides:
            require("=" in item, f"override '{item}' is not key=value")
            key, value = item.split("=", 1)
            _set_field(self, key.strip(), value.strip())
        return self.validate()

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        canon = "\n".join(f"{k}={v}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _set_field(cfg: Config, key: str, raw: str):
    lookup = {f.name: f for f in fields(Config)}
    require(key in lookup, f"unknown config key '{key}'")
    kind = lookup[key].type
    if kind in ("int", int):
        value = int(raw)
    elif kind in ("float", float):
        value = float(raw)
    else:
        value = raw
    setattr(cfg, key, value)


def load_config(path=None, overrides: list[str] | None = None) -> Config:
    cfg = Config()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                require("=" in line, f"{path}: line {lineno}: expected key = value")
                key, value = line.split("=", 1)
                _set_field(cfg, key.strip(), value.strip())
    if overrides:
        cfg.apply_overrides(overrides)
    return cfg.validate()
