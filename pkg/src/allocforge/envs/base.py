"""Environment state, the shared step logic and the per-environment dynamics hook."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..core import (Allocation, Entity, EntityKind, InvalidAllocationError, Task, completion_check,
                    task_profit)
from .spec import EnvSpec


@dataclass
class EnvState:
    spec: EnvSpec
    step: int
    tasks: list[Task]
    entities: list[Entity]
    rng: np.random.Generator
    next_task_id: int = 0
    extra: dict = field(default_factory=dict)

    def copy(self) -> EnvState:
        return EnvState(
            spec=self.spec, step=self.step,
            tasks=[t.copy() for t in self.tasks],
            entities=[e.copy() for e in self.entities],
            rng=copy.deepcopy(self.rng), next_task_id=self.next_task_id,
            extra=copy.deepcopy(self.extra),
        )

    @property
    def done(self) -> bool:
        return self.step >= self.spec.episode_length


@dataclass
class StepResult:
    state: EnvState
    reward: float
    worker_rewards: dict[int, float]
    done: bool
    completed: list[int]
    consumed: np.ndarray | None = None


class Dynamics:
    """Environment-specific rules. Subclasses fill in reset, pricing and the clock tick."""

    def reset(self, spec: EnvSpec, rng: np.random.Generator) -> EnvState:
        raise NotImplementedError

    def cost(self, state: EnvState, entity: Entity, task: Task) -> float:
        """Price of ``entity`` working on ``task``; ``inf`` when it cannot serve it."""
        raise NotImplementedError

    def on_complete(self, state: EnvState, task: Task, selected: list[Entity]) -> np.ndarray:
        """Apply completion side effects; returns resources consumed."""
        return np.zeros(state.spec.resource_dim)

    def advance(self, state: EnvState) -> None:
        """Clock tick after rewards: releases, decay, spawns."""


def entity_cost(state: EnvState, entity: Entity, task: Task) -> float:
    if entity.kind is EntityKind.WORKER:
        return float(entity.demand)
    return get_dynamics(state.spec).cost(state, entity, task)


def price(state: EnvState, entity: Entity, task: Task) -> Entity:
    """Copy of ``entity`` whose demand is its cost for ``task``."""
    return replace(entity, demand=entity_cost(state, entity, task))


def _priced_selection(state: EnvState, task: Task, ids: list[int], by_id: dict[int, Entity]) -> list[Entity]:
    out = []
    for i in ids:
        e = by_id[i]
        c = entity_cost(state, e, task)
        # ineligible entities make the task unprofitable rather than erroring
        out.append(replace(e, demand=c) if math.isfinite(c) else replace(e, demand=1e18))
    return out


def check_allocation(state: EnvState, allocation: Allocation) -> None:
    allocation.validate(task_ids=[t.id for t in state.tasks], entity_ids=[e.id for e in state.entities])
    by_id = {e.id: e for e in state.entities}
    for ids in allocation.assignments.values():
        for i in ids:
            if not by_id[i].available:
                raise InvalidAllocationError(f"entity {i} is committed to task {by_id[i].committed_to}")


def step_in_place(state: EnvState, allocation: Allocation) -> StepResult:
    """Resolve ``allocation`` against ``state`` (mutated) and advance the clock."""
    check_allocation(state, allocation)
    dyn = get_dynamics(state.spec)
    by_id = {e.id: e for e in state.entities}
    reward = 0.0
    completed: list[int] = []
    worker_rewards: dict[int, float] = {}
    consumed = np.zeros(state.spec.resource_dim)
    for task in list(state.tasks):
        if task.id in allocation.abandoned:
            continue
        ids = allocation.assignments.get(task.id, [])
        selected = _priced_selection(state, task, ids, by_id)
        if not completion_check(task, selected):
            continue
        reward += task_profit(task, selected)
        completed.append(task.id)
        for e in selected:
            if e.kind is EntityKind.WORKER:
                worker_rewards[e.id] = worker_rewards.get(e.id, 0.0) + e.demand
        consumed += dyn.on_complete(state, task, [by_id[i] for i in ids])
        task.completed = True
        task.residual = np.zeros_like(task.residual)
    state.tasks = [t for t in state.tasks if not t.completed]
    state.step += 1
    dyn.advance(state)
    return StepResult(state, reward, worker_rewards, state.done, completed, consumed)


def env_reset(spec: EnvSpec, seed: int) -> EnvState:
    spec.validate()
    return get_dynamics(spec).reset(spec, np.random.default_rng(seed))


def env_step(state: EnvState, allocation: Allocation) -> StepResult:
    """Pure step: ``state`` is left untouched, errors leave no trace."""
    return step_in_place(state.copy(), allocation)


class Env:
    """Stateful wrapper used by trainers and solvers."""

    def __init__(self, spec: EnvSpec):
        spec.validate()
        self.spec = spec
        self.dynamics = get_dynamics(spec)
        self.state: EnvState | None = None

    def reset(self, seed: int) -> EnvState:
        self.state = env_reset(self.spec, seed)
        return self.state

    def step(self, allocation: Allocation) -> StepResult:
        check_allocation(self.state, allocation)
        return step_in_place(self.state, allocation)

    def cost(self, entity: Entity, task: Task) -> float:
        return entity_cost(self.state, entity, task)

    def set_bids(self, bids: dict[int, float]) -> None:
        for e in self.state.entities:
            if e.id in bids:
                if e.kind is not EntityKind.WORKER:
                    raise ValueError(f"entity {e.id} is an item; its demand comes from the cost rule")
                e.demand = max(0.0, float(bids[e.id]))

    def clone(self, seed: int | None = None) -> Env:
        other = Env(self.spec)
        other.state = self.state.copy()
        if seed is not None:
            other.state.rng = np.random.default_rng(seed)
        return other

    @property
    def done(self) -> bool:
        return self.state.done


_REGISTRY: dict[str, Dynamics] = {}


def register(name: str, dynamics: Dynamics) -> None:
    _REGISTRY[name] = dynamics


def get_dynamics(spec: EnvSpec) -> Dynamics:
    return _REGISTRY[spec.name]
