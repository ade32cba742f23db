"""Experiment configuration: a flat ``key = value`` file with a version header."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..allocator import Mode
from ..envs import ConfigError
from ..heuristics import ALGORITHMS as HEURISTICS
from ..trainers import TrainConfig

CONFIG_HEADER = "allocforge-config v1"
LEARNED = tuple(m.value for m in Mode)
ALGORITHMS = LEARNED + HEURISTICS


@dataclass
class ExperimentConfig:
    env: str = "rbf-small"              # builtin spec name or path to a spec file
    algorithm: str = "two_stage"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    iterations: int = 1000              # training episodes per seed
    few_shot_budget: int = 100          # fine-tuning episodes for few-shot generalization
    few_shot_epsilon: float = 0.1
    out: str = "runs"
    worker_mode: bool = False
    eval_episodes: int = 20
    greedy_eval: bool = False
    # network shape
    d: int = 64
    h: int = 64
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    # optimisation, see TrainConfig
    lr: float = 1e-4
    actor_lr: float = 0.0               # 0 = same as lr
    batch_size: int = 32
    buffer_capacity: int = 1000
    gamma: float = 0.98
    tau: float = 0.005
    alpha: float = 0.05
    eps_start: float = 1.0
    eps_floor: float = 0.05
    eps_decay: float = 0.9999
    sigma_start: float = 0.5
    sigma_floor: float = 0.05
    sigma_decay: float = 0.9999
    bootstrap_samples: int = 15
    updates_per_step: int = 1
    # heuristics: simulated environment steps per episode (0 = match the learners' training steps)
    heuristic_budget: int = 0
    replan_interval: int = 10
    horizon: int = 10
    population: int = 100
    wall_clock: bool = True

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.iterations < 0 or self.few_shot_budget < 0 or self.eval_episodes < 1:
            raise ConfigError("iterations and budgets must be non-negative, eval_episodes positive")
        if self.lr <= 0 or self.actor_lr < 0 or self.batch_size < 1 or self.buffer_capacity < 1 or self.updates_per_step < 1:
            raise ConfigError("bad optimiser settings")
        if not (0 <= self.gamma <= 1) or not (0 <= self.tau <= 1) or self.alpha < 0:
            raise ConfigError("gamma and tau must lie in [0, 1], alpha >= 0")
        if self.d < 1 or self.h < 1 or any(w < 1 for w in self.hidden):
            raise ConfigError("layer widths must be positive")
        if self.horizon < 1 or self.replan_interval < 1 or self.population < 2 or self.heuristic_budget < 0:
            raise ConfigError("bad heuristic settings")

    @property
    def learned(self) -> bool:
        return self.algorithm in LEARNED

    def train_config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        kw["actor_lr"] = self.actor_lr or None
        return TrainConfig(**kw)

    def replace(self, **changes) -> ExperimentConfig:
        out = dataclasses.replace(self, **changes)
        out.validate()
        return out


_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _parse(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind == "str":
            return raw
        if kind == "bool":
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "list[int]":
            return [int(x) for x in raw.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"unsupported field type for {key}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(str(x) for x in value)
    return str(value)


def loads_config(text: str) -> ExperimentConfig:
    content = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    content = [ln for ln in content if ln]
    if not content or content[0] != CONFIG_HEADER:
        raise ConfigError(f"missing header line {CONFIG_HEADER!r}")
    values = {}
    for ln in content[1:]:
        if "=" not in ln:
            raise ConfigError(f"expected key = value, got {ln!r}")
        key, raw = (s.strip() for s in ln.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}")
        if key in values:
            raise ConfigError(f"duplicate key {key!r}")
        values[key] = _parse(key, raw)
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def dumps_config(cfg: ExperimentConfig) -> str:
    lines = [CONFIG_HEADER]
    for f in dataclasses.fields(ExperimentConfig):
        lines.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads_config(text)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps_config(cfg))
