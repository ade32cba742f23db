"""Environment specifications and their flat key=value file format.

File layout::

    allocforge-spec v1
    # comments start with '#'
    name = rbf
    n_entities = 100
    task_kind_probs = 0.5, 0.5
    task_kind_profiles = 1.0 0.6; 0.6 1.0

Scalars are ints, floats or true/false; lists are comma separated; lists of
vectors separate vectors with ';' and components with whitespace. Unknown keys
are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

SPEC_HEADER = "allocforge-spec v1"
ENV_NAMES = ("retain", "rbf", "mt", "ept")


class ConfigError(ValueError):
    pass


@dataclass
class EnvSpec:
    name: str
    n_entities: int = 20
    resource_dim: int = 2
    extent: float = 10.0
    episode_length: int = 50
    max_tasks: int = 10
    entity_seed: int = 0
    speed: float = 5.0
    # entity resources drawn uniformly from [res_low, res_high]
    res_low: float = 1.0
    res_high: float = 3.0
    integer_resources: bool = True
    # task spawning
    spawn_interval: int = 5
    spawn_min: int = 5
    spawn_max: int = 10
    spawn_rate: float = 1.0
    peak_prob: float = 0.1
    req_low: float = 1.0
    req_high: float = 6.0
    req_scale: float = 1.0
    task_kind_probs: list[float] = field(default_factory=lambda: [1.0])
    task_kind_profiles: list[list[float]] = field(default_factory=lambda: [[1.0, 1.0]])
    task_ttl: int = 30
    # rewards and costs
    reward_base: float = 0.0
    reward_per_unit: float = 1.0
    final_reward: float = 5.0
    base_cost: float = 0.0
    cost_per_distance: float = 0.05
    cost_per_resource: float = 0.1
    # stale-task decay
    decay_grace: int = 10
    decay_interval: int = 5
    decay_factor: float = 0.9
    # Retain-the-Almighty structure: exclusive best-set sizes for tasks 1..N-1
    exclusive_sizes: list[int] = field(default_factory=list)
    # electric power network
    extra_edges: int = 10
    wire_costs: list[float] = field(default_factory=lambda: [0.1, 0.3, 0.5])
    worker_mode: bool = False

    def validate(self) -> None:
        if self.name not in ENV_NAMES:
            raise ConfigError(f"unknown environment {self.name!r}; expected one of {ENV_NAMES}")
        if self.name == "retain":
            if len(self.exclusive_sizes) < 1 or any(s < 1 for s in self.exclusive_sizes):
                raise ConfigError("retain needs at least one exclusive best-set size, each >= 1")
            if self.n_entities != 1 + sum(self.exclusive_sizes):
                raise ConfigError("retain: n_entities must equal 1 + sum(exclusive_sizes)")
            if self.resource_dim != len(self.exclusive_sizes) + 1:
                raise ConfigError("retain: resource_dim must equal the task count")
        if self.n_entities < 1 or self.resource_dim < 1:
            raise ConfigError("need at least one entity and one resource dimension")
        if self.episode_length < 1 or self.max_tasks < 1:
            raise ConfigError("episode_length and max_tasks must be positive")
        if self.extent <= 0 or self.speed <= 0:
            raise ConfigError("extent and speed must be positive")
        if not (0 <= self.res_low <= self.res_high):
            raise ConfigError("need 0 <= res_low <= res_high")
        if not (0 <= self.req_low <= self.req_high) or self.req_scale <= 0:
            raise ConfigError("bad requirement range")
        if self.spawn_min > self.spawn_max or self.spawn_min < 0 or self.spawn_interval < 1:
            raise ConfigError("bad spawn rule")
        if not (0 <= self.peak_prob <= 1) or self.spawn_rate < 0:
            raise ConfigError("bad spawn probability")
        if len(self.task_kind_probs) != len(self.task_kind_profiles) or not self.task_kind_probs:
            raise ConfigError("one task kind probability per profile")
        if any(p < 0 for p in self.task_kind_probs) or abs(sum(self.task_kind_probs) - 1.0) > 1e-9:
            raise ConfigError("task_kind_probs must be non-negative and sum to 1")
        if self.name != "retain" and any(len(p) != self.resource_dim for p in self.task_kind_profiles):
            raise ConfigError("each task kind profile needs resource_dim components")
        if not (0 < self.decay_factor <= 1) or self.decay_interval < 1 or self.task_ttl < 1:
            raise ConfigError("bad decay rule")
        if self.name == "ept" and (not self.wire_costs or any(c <= 0 for c in self.wire_costs)):
            raise ConfigError("ept needs positive wire costs")
        if self.worker_mode and self.name != "rbf":
            raise ConfigError("worker mode is only defined for rbf")

    def replace(self, **changes) -> EnvSpec:
        out = dataclasses.replace(self, **changes)
        out.validate()
        return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        if value and isinstance(value[0], list):
            return "; ".join(" ".join(repr(float(x)) for x in row) for row in value)
        return ", ".join(repr(x) for x in value)
    return repr(value) if not isinstance(value, str) else value


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(EnvSpec)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
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
        if kind == "list[float]":
            return [float(x) for x in raw.split(",") if x.strip()]
        if kind == "list[int]":
            return [int(x) for x in raw.split(",") if x.strip()]
        if kind == "list[list[float]]":
            return [[float(x) for x in row.split()] for row in raw.split(";") if row.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"unsupported field type for {key}")


def dumps_spec(spec: EnvSpec) -> str:
    lines = [SPEC_HEADER]
    for f in dataclasses.fields(EnvSpec):
        lines.append(f"{f.name} = {_format(getattr(spec, f.name))}")
    return "\n".join(lines) + "\n"


def loads_spec(text: str) -> EnvSpec:
    lines = [ln for ln in text.splitlines()]
    body = [ln.split("#", 1)[0].strip() for ln in lines]
    content = [ln for ln in body if ln]
    if not content or content[0] != SPEC_HEADER:
        raise ConfigError(f"missing header line {SPEC_HEADER!r}")
    values: dict = {}
    for ln in content[1:]:
        if "=" not in ln:
            raise ConfigError(f"expected key = value, got {ln!r}")
        key, raw = (s.strip() for s in ln.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    if "name" not in values:
        raise ConfigError("spec needs a name")
    spec = EnvSpec(**values)
    spec.validate()
    return spec


def save_spec(spec: EnvSpec, path: str | Path) -> None:
    Path(path).write_text(dumps_spec(spec))


def load_spec(path: str | Path) -> EnvSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read spec {path}: {exc}") from exc
    return loads_spec(text)


def builtin_spec(name: str) -> EnvSpec:
    """Fixture specs; the paper leaves most constants open, these are our defaults."""
    specs = {
        "retain": EnvSpec(
            name="retain", n_entities=10, resource_dim=5, extent=1.0, episode_length=1, max_tasks=5,
            exclusive_sizes=[3, 2, 2, 2], reward_base=1.0, final_reward=5.0, base_cost=0.1,
            task_kind_profiles=[[1.0]], task_ttl=1),
        "rbf": EnvSpec(
            name="rbf", n_entities=100, resource_dim=2, extent=20.0, episode_length=50, max_tasks=20,
            res_low=1, res_high=3, spawn_interval=5, spawn_min=5, spawn_max=10, req_low=1, req_high=6,
            task_kind_probs=[0.5, 0.5], task_kind_profiles=[[1.0, 0.6], [0.6, 1.0]],
            reward_per_unit=1.0, cost_per_distance=0.05, cost_per_resource=0.1),
        "rbf-small": EnvSpec(
            name="rbf", n_entities=20, resource_dim=2, extent=10.0, episode_length=20, max_tasks=8,
            res_low=1, res_high=3, spawn_interval=5, spawn_min=2, spawn_max=4, req_low=1, req_high=6,
            task_kind_probs=[0.5, 0.5], task_kind_profiles=[[1.0, 0.6], [0.6, 1.0]],
            reward_per_unit=1.0, cost_per_distance=0.05, cost_per_resource=0.1),
        "mt": EnvSpec(
            name="mt", n_entities=50, resource_dim=2, extent=100.0, episode_length=50, max_tasks=20,
            res_low=1.0, res_high=6.0, integer_resources=False, spawn_rate=1.0, req_low=2.0, req_high=8.0,
            task_kind_probs=[1.0], task_kind_profiles=[[1.0, 1.0]], task_ttl=10,
            reward_per_unit=1.0, cost_per_distance=0.02, cost_per_resource=0.0, speed=20.0),
        "mt-small": EnvSpec(
            name="mt", n_entities=10, resource_dim=2, extent=50.0, episode_length=20, max_tasks=6,
            res_low=1.0, res_high=6.0, integer_resources=False, spawn_rate=0.5, req_low=2.0, req_high=8.0,
            task_kind_probs=[1.0], task_kind_profiles=[[1.0, 1.0]], task_ttl=10,
            reward_per_unit=1.0, cost_per_distance=0.02, cost_per_resource=0.0, speed=20.0),
        "ept": EnvSpec(
            name="ept", n_entities=20, resource_dim=1, extent=100.0, episode_length=50, max_tasks=20,
            res_low=0.0, res_high=10.0, integer_resources=False, peak_prob=0.1, req_low=5.0, req_high=15.0,
            task_kind_probs=[1.0], task_kind_profiles=[[1.0]], reward_base=30.0, reward_per_unit=0.0,
            extra_edges=10, wire_costs=[0.1, 0.3, 0.5], task_ttl=1),
    }
    if name not in specs:
        raise ConfigError(f"unknown builtin spec {name!r}; choose from {sorted(specs)}")
    spec = specs[name]
    spec.validate()
    return spec


def resolve_spec(ref: str) -> EnvSpec:
    """A builtin name or a path to a spec file."""
    if Path(ref).exists():
        return load_spec(ref)
    return builtin_spec(ref)
