"""Domain types and reward accounting shared by the allocator, environments and solvers."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np


class InvalidAllocationError(ValueError):
    """Allocation references unknown ids or assigns one entity to several tasks."""


def resource_vector(values: Iterable[float]) -> np.ndarray:
    """Validate and return a float64 copy of a non-negative resource vector."""
    arr = np.array(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"resource vector must be 1-D, got shape {arr.shape}")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ValueError(f"resource vector must be finite and non-negative: {arr}")
    return arr


class EntityKind(enum.Enum):
    ITEM = "item"
    WORKER = "worker"


@dataclass
class Task:
    id: int
    reward: float
    requirement: np.ndarray
    position: np.ndarray = field(default_factory=lambda: np.zeros(2))
    residual: np.ndarray | None = None
    completed: bool = False
    age: int = 0
    kind: int = 0

    def __post_init__(self) -> None:
        self.requirement = resource_vector(self.requirement)
        self.residual = self.requirement.copy() if self.residual is None else resource_vector(self.residual)
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.residual.shape != self.requirement.shape:
            raise ValueError("residual and requirement differ in length")

    def copy(self) -> Task:
        return replace(self, requirement=self.requirement.copy(), residual=self.residual.copy(),
                       position=self.position.copy())


@dataclass
class Entity:
    id: int
    resources: np.ndarray
    position: np.ndarray = field(default_factory=lambda: np.zeros(2))
    demand: float = 0.0
    kind: EntityKind = EntityKind.ITEM
    committed_to: int | None = None
    # step at which a committed entity becomes available again
    release_step: int | None = None

    def __post_init__(self) -> None:
        self.resources = resource_vector(self.resources)
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.demand < 0:
            raise ValueError("entity demand must be non-negative")

    @property
    def available(self) -> bool:
        return self.committed_to is None

    def copy(self) -> Entity:
        return replace(self, resources=self.resources.copy(), position=self.position.copy())


@dataclass
class Allocation:
    """Ordered entity ids per task, plus the tasks the manager gave up on."""

    assignments: dict[int, list[int]] = field(default_factory=dict)
    abandoned: set[int] = field(default_factory=set)

    def entity_ids(self) -> list[int]:
        return [e for ids in self.assignments.values() for e in ids]

    def validate(self, task_ids: Iterable[int] | None = None, entity_ids: Iterable[int] | None = None) -> None:
        seen: set[int] = set()
        for tid, ids in self.assignments.items():
            if tid in self.abandoned and ids:
                raise InvalidAllocationError(f"abandoned task {tid} has entities {ids}")
            for e in ids:
                if e in seen:
                    raise InvalidAllocationError(f"entity {e} assigned to more than one task")
                seen.add(e)
        if task_ids is not None:
            known = set(task_ids)
            unknown = (set(self.assignments) | self.abandoned) - known
            if unknown:
                raise InvalidAllocationError(f"unknown task ids {sorted(unknown)}")
        if entity_ids is not None:
            unknown = seen - set(entity_ids)
            if unknown:
                raise InvalidAllocationError(f"unknown entity ids {sorted(unknown)}")

    def to_json(self) -> dict:
        return {"assignments": {str(k): list(v) for k, v in sorted(self.assignments.items())},
                "abandoned": sorted(self.abandoned)}


def task_profit(task: Task, selected: Sequence[Entity]) -> float:
    """Reward of the task minus the summed demand of the selected entities."""
    return float(task.reward) - float(sum(e.demand for e in selected))


def completion_check(task: Task, selected: Sequence[Entity]) -> bool:
    """True when the selection covers the requirement and the task is worth doing.

    A negative profit means the manager abandons the task, so it counts as
    incomplete even if the resources suffice.
    """
    if selected:
        total = np.sum([e.resources for e in selected], axis=0)
    else:
        total = np.zeros_like(task.requirement)
    if np.any(total < task.requirement):
        return False
    return task_profit(task, selected) >= 0.0


def manager_step_reward(tasks: Sequence[Task], allocation: Allocation, entities: Sequence[Entity]) -> float:
    by_id = {e.id: e for e in entities}
    allocation.validate(task_ids=[t.id for t in tasks], entity_ids=by_id)
    total = 0.0
    for task in tasks:
        if task.id in allocation.abandoned:
            continue
        selected = [by_id[i] for i in allocation.assignments.get(task.id, [])]
        if completion_check(task, selected):
            total += task_profit(task, selected)
    return total


def completed_tasks(tasks: Sequence[Task], allocation: Allocation, entities: Sequence[Entity]) -> list[int]:
    """Ids of tasks whose allocated selection passes completion_check."""
    by_id = {e.id: e for e in entities}
    done = []
    for task in tasks:
        if task.id in allocation.abandoned:
            continue
        selected = [by_id[i] for i in allocation.assignments.get(task.id, [])]
        if completion_check(task, selected):
            done.append(task.id)
    return done


def distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))
