"""The four benchmark environments.

Many constants are fixtures (see ``builtin_spec``); the rules themselves:

* retain: every task i needs one unit of resource i. Exclusive best-set
  members carry only their task's resource, the almighty entity carries all.
* rbf: apples spawn every ``spawn_interval`` steps; committed entities travel
  for ceil(distance / speed) steps; stale apples lose reward and requirement.
* mt: trucks carry cargo; delivering empties every contributing truck.
* ept: peak towers are tasks; other towers ship surplus over existing wires
  at distance times the wire's per-meter cost.
"""

from __future__ import annotations

import math

import numpy as np

from ..core import Entity, EntityKind, Task, distance
from .base import Dynamics, EnvState, register
from .spec import EnvSpec


def _entity_rng(spec: EnvSpec) -> np.random.Generator:
    return np.random.default_rng([spec.entity_seed, 7919])


def _draw_resources(rng: np.random.Generator, spec: EnvSpec, size) -> np.ndarray:
    if spec.integer_resources:
        return rng.integers(int(spec.res_low), int(spec.res_high) + 1, size=size).astype(np.float64)
    return rng.uniform(spec.res_low, spec.res_high, size=size)


def _new_task(state: EnvState, position, requirement, reward: float, kind: int = 0) -> Task:
    task = Task(id=state.next_task_id, reward=float(reward), requirement=requirement,
                position=np.asarray(position, dtype=np.float64), kind=kind)
    state.next_task_id += 1
    state.tasks.append(task)
    return task


def _draw_requirement(rng: np.random.Generator, spec: EnvSpec) -> tuple[np.ndarray, int]:
    kind = int(rng.choice(len(spec.task_kind_probs), p=spec.task_kind_probs))
    profile = np.asarray(spec.task_kind_profiles[kind])
    base = rng.uniform(spec.req_low, spec.req_high, size=spec.resource_dim)
    req = base * profile * spec.req_scale
    if spec.integer_resources:
        req = np.maximum(1.0, np.round(req))
    return req, kind


def _release(state: EnvState) -> None:
    targets = state.extra.setdefault("targets", {})
    for e in state.entities:
        if e.committed_to is not None and e.release_step is not None and state.step >= e.release_step:
            e.position = np.asarray(targets.pop(e.id), dtype=np.float64)
            e.committed_to = None
            e.release_step = None


def _commit(state: EnvState, task: Task, selected: list[Entity]) -> None:
    targets = state.extra.setdefault("targets", {})
    for e in selected:
        travel = max(1, math.ceil(distance(e.position, task.position) / state.spec.speed))
        e.committed_to = task.id
        e.release_step = state.step + travel
        targets[e.id] = task.position.copy()


def _age_tasks(state: EnvState) -> None:
    spec = state.spec
    kept = []
    for t in state.tasks:
        t.age += 1
        if t.age > spec.decay_grace and (t.age - spec.decay_grace) % spec.decay_interval == 0:
            t.reward *= spec.decay_factor
            t.requirement = t.requirement * spec.decay_factor
            t.residual = np.minimum(t.residual * spec.decay_factor, t.requirement)
        if t.age < spec.task_ttl:
            kept.append(t)
    state.tasks = kept


class RetainDynamics(Dynamics):
    def reset(self, spec: EnvSpec, rng: np.random.Generator) -> EnvState:
        N = len(spec.exclusive_sizes) + 1
        entities = [Entity(id=0, resources=np.ones(N), demand=spec.base_cost)]
        nxt = 1
        for task_idx, size in enumerate(spec.exclusive_sizes):
            for _ in range(size):
                res = np.zeros(N)
                res[task_idx] = 1.0
                entities.append(Entity(id=nxt, resources=res, demand=spec.base_cost))
                nxt += 1
        state = EnvState(spec=spec, step=0, tasks=[], entities=entities, rng=rng)
        for i in range(N):
            req = np.zeros(N)
            req[i] = 1.0
            reward = spec.final_reward if i == N - 1 else spec.reward_base
            _new_task(state, position=np.zeros(2), requirement=req, reward=reward, kind=i)
        return state

    def cost(self, state, entity, task) -> float:
        return state.spec.base_cost

    @staticmethod
    def best_sets(spec: EnvSpec) -> list[list[int]]:
        sets, nxt = [], 1
        for size in spec.exclusive_sizes:
            sets.append(list(range(nxt, nxt + size)) + [0])
            nxt += size
        sets.append([0])
        return sets


class RBFDynamics(Dynamics):
    def reset(self, spec: EnvSpec, rng: np.random.Generator) -> EnvState:
        erng = _entity_rng(spec)
        res = _draw_resources(erng, spec, (spec.n_entities, spec.resource_dim))
        center = np.full(2, spec.extent / 2.0)
        kind = EntityKind.WORKER if spec.worker_mode else EntityKind.ITEM
        entities = [Entity(id=i, resources=res[i], position=center.copy(), kind=kind,
                           demand=0.0 if spec.worker_mode else self.base_demand(spec, res[i]))
                    for i in range(spec.n_entities)]
        state = EnvState(spec=spec, step=0, tasks=[], entities=entities, rng=rng)
        self._spawn(state)
        return state

    @staticmethod
    def base_demand(spec: EnvSpec, resources: np.ndarray) -> float:
        return spec.base_cost + spec.cost_per_resource * float(np.sum(resources))

    def cost(self, state, entity, task) -> float:
        spec = state.spec
        return self.base_demand(spec, entity.resources) + spec.cost_per_distance * distance(entity.position, task.position)

    def on_complete(self, state, task, selected) -> np.ndarray:
        _commit(state, task, selected)
        return np.zeros(state.spec.resource_dim)

    def _spawn(self, state: EnvState) -> None:
        spec, rng = state.spec, state.rng
        count = int(rng.integers(spec.spawn_min, spec.spawn_max + 1))
        cells = int(spec.extent)
        for _ in range(count):
            pos = rng.integers(0, cells, size=2).astype(np.float64)
            req, kind = _draw_requirement(rng, spec)
            if len(state.tasks) < spec.max_tasks:
                _new_task(state, pos, req, spec.reward_base + spec.reward_per_unit * float(np.sum(req)), kind)

    def advance(self, state: EnvState) -> None:
        _release(state)
        _age_tasks(state)
        if state.step % state.spec.spawn_interval == 0:
            self._spawn(state)


class MTDynamics(Dynamics):
    def reset(self, spec: EnvSpec, rng: np.random.Generator) -> EnvState:
        erng = _entity_rng(spec)
        res = _draw_resources(erng, spec, (spec.n_entities, spec.resource_dim))
        pos = erng.uniform(0, spec.extent, size=(spec.n_entities, 2))
        entities = [Entity(id=i, resources=res[i], position=pos[i], demand=spec.base_cost)
                    for i in range(spec.n_entities)]
        state = EnvState(spec=spec, step=0, tasks=[], entities=entities, rng=rng)
        self._spawn(state)
        return state

    def cost(self, state, entity, task) -> float:
        spec = state.spec
        return spec.base_cost + spec.cost_per_distance * distance(entity.position, task.position)

    def on_complete(self, state, task, selected) -> np.ndarray:
        consumed = np.sum([e.resources for e in selected], axis=0)
        for e in selected:
            e.resources = np.zeros_like(e.resources)
        _commit(state, task, selected)
        return consumed

    def _spawn(self, state: EnvState) -> None:
        spec, rng = state.spec, state.rng
        count = int(rng.poisson(spec.spawn_rate))
        for _ in range(count):
            pos = rng.uniform(0, spec.extent, size=2)
            req, kind = _draw_requirement(rng, spec)
            if len(state.tasks) < spec.max_tasks:
                _new_task(state, pos, req, spec.reward_base + spec.reward_per_unit * float(np.sum(req)), kind)

    def advance(self, state: EnvState) -> None:
        _release(state)
        _age_tasks(state)
        self._spawn(state)


class EPTDynamics(Dynamics):
    def reset(self, spec: EnvSpec, rng: np.random.Generator) -> EnvState:
        erng = _entity_rng(spec)
        n = spec.n_entities
        pos = erng.uniform(0, spec.extent, size=(n, 2))
        order = erng.permutation(n)
        edges: dict[tuple[int, int], float] = {}
        for k in range(1, n):
            a, b = int(order[k]), int(order[erng.integers(0, k)])
            edges[(min(a, b), max(a, b))] = float(erng.choice(spec.wire_costs))
        candidates = [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in edges]
        extra = min(spec.extra_edges, len(candidates))
        for idx in erng.choice(len(candidates), size=extra, replace=False):
            edges[candidates[int(idx)]] = float(erng.choice(spec.wire_costs))
        entities = [Entity(id=i, resources=np.zeros(spec.resource_dim), position=pos[i]) for i in range(n)]
        state = EnvState(spec=spec, step=0, tasks=[], entities=entities, rng=rng,
                         extra={"edges": edges, "task_tower": {}})
        self._resample(state)
        return state

    def cost(self, state, entity, task) -> float:
        tower = state.extra["task_tower"][task.id]
        if entity.id == tower:
            return math.inf
        wire = state.extra["edges"].get((min(entity.id, tower), max(entity.id, tower)))
        if wire is None:
            return math.inf
        return state.spec.base_cost + wire * distance(entity.position, task.position)

    def _resample(self, state: EnvState) -> None:
        spec, rng = state.spec, state.rng
        n = spec.n_entities
        surplus = rng.uniform(spec.res_low, spec.res_high, size=(n, spec.resource_dim))
        peak = rng.random(n) < spec.peak_prob
        demand = rng.uniform(spec.req_low, spec.req_high, size=(n, spec.resource_dim)) * spec.req_scale
        state.tasks = []
        state.extra["task_tower"] = {}
        for i, e in enumerate(state.entities):
            e.resources = np.zeros(spec.resource_dim) if peak[i] else surplus[i]
        for i in np.nonzero(peak)[0][: spec.max_tasks]:
            t = _new_task(state, state.entities[i].position.copy(), demand[i],
                          spec.reward_base + spec.reward_per_unit * float(np.sum(demand[i])))
            state.extra["task_tower"][t.id] = int(i)

    def advance(self, state: EnvState) -> None:
        self._resample(state)


register("retain", RetainDynamics())
register("rbf", RBFDynamics())
register("mt", MTDynamics())
register("ept", EPTDynamics())
