"""Metaheuristic baselines (GA, PSO, SOS), their rolling re-plan driver, and an exhaustive oracle.

Encoding: one real gene per (planning step, entity) in [0, N+2). The integer
part k picks task k (1-based, in the order the state lists tasks); 0 or
anything above N leaves the entity unassigned.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Allocation, Entity, Task
from .envs import Env

ALGORITHMS = ("ga", "pso", "sos")
POPULATION = 100
ORACLE_LIMIT = 10_000_000


class EncodingError(ValueError):
    pass


class SizeError(ValueError):
    pass


Fitness = Callable[[np.ndarray], float]


def gene_upper(N: int) -> float:
    return float(N + 2)


def _clip(x: np.ndarray, upper: float) -> np.ndarray:
    return np.clip(x, 0.0, np.nextafter(upper, 0.0))


# ---------------------------------------------------------------------------
# encoding


@dataclass
class Chromosome:
    genes: np.ndarray
    n: int
    N: int

    @property
    def horizon(self) -> int:
        return len(self.genes) // self.n

    def slice(self, step: int) -> np.ndarray:
        return self.genes[step * self.n:(step + 1) * self.n]


def decode_slots(genes: np.ndarray, N: int) -> np.ndarray:
    """Integer part rule: 1..N is a task slot, everything else maps to 0 (unassigned)."""
    genes = np.asarray(genes, dtype=np.float64)
    if np.any(~np.isfinite(genes)) or np.any(genes < 0) or np.any(genes >= N + 2):
        raise EncodingError(f"genes must lie in [0, {N + 2})")
    k = np.floor(genes).astype(np.int64)
    return np.where((k >= 1) & (k <= N), k, 0)


def decode(chromosome: Chromosome, step: int, tasks: Sequence[Task] | None = None,
           entities: Sequence[Entity] | None = None) -> Allocation:
    """Allocation for ``step`` of the plan against the current tasks and entities.

    Without ``tasks``/``entities`` the slots themselves are used as ids
    (task k -> id k - 1, entity i -> id i). Slots pointing past the task list
    and committed entities become unassigned.
    """
    slots = decode_slots(chromosome.slice(step), chromosome.N)
    alloc = Allocation()
    task_ids = [t.id for t in tasks] if tasks is not None else list(range(chromosome.N))
    ents = list(entities) if entities is not None else None
    for i, k in enumerate(slots):
        if k == 0 or k > len(task_ids):
            continue
        if ents is not None:
            if i >= len(ents) or not ents[i].available:
                continue
            eid = ents[i].id
        else:
            eid = i
        alloc.assignments.setdefault(task_ids[k - 1], []).append(eid)
    return alloc


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class SearchResult:
    best: np.ndarray
    best_fitness: float
    history: list[float] = field(default_factory=list)
    evaluations: int = 0


def _evaluate(population: np.ndarray, fitness: Fitness) -> np.ndarray:
    return np.array([fitness(x) for x in population], dtype=np.float64)


def ga_evolve(population: np.ndarray, fitness: Fitness, generations: int, rng: np.random.Generator,
              upper: float, mutation: float = 0.05, crossover: float = 0.5, elitism: int = 1) -> SearchResult:
    """Fitness-proportional selection, single-point crossover, uniform resampling mutation, elitism."""
    pop = np.array(population, dtype=np.float64)
    P, L = pop.shape
    fit = _evaluate(pop, fitness)
    evals = P
    b = int(np.argmax(fit))
    best, best_f = pop[b].copy(), float(fit[b])
    history = [best_f]
    for _ in range(generations):
        order = np.argsort(-fit, kind="stable")
        elites = pop[order[:elitism]].copy()
        w = fit - fit.min() + 1e-9
        parents = pop[rng.choice(P, size=P, p=w / w.sum())]
        children = parents.copy()
        for i in range(0, P - 1, 2):
            if L > 1 and rng.random() < crossover:
                c = int(rng.integers(1, L))
                children[i, c:], children[i + 1, c:] = parents[i + 1, c:].copy(), parents[i, c:].copy()
        mask = rng.random((P, L)) < mutation
        children[mask] = rng.uniform(0.0, upper, size=int(mask.sum()))
        children = _clip(children, upper)
        children[:elitism] = elites
        pop = children
        fit = _evaluate(pop, fitness)
        evals += P
        b = int(np.argmax(fit))
        if fit[b] > best_f:
            best, best_f = pop[b].copy(), float(fit[b])
        history.append(best_f)
    return SearchResult(best, best_f, history, evals)


def pso_iterate(positions: np.ndarray, fitness: Fitness, iterations: int, rng: np.random.Generator,
                upper: float, inertia: float = 0.5, c1: float = 1.5, c2: float = 1.5,
                velocities: np.ndarray | None = None) -> SearchResult:
    x = _clip(np.array(positions, dtype=np.float64), upper)
    v = np.zeros_like(x) if velocities is None else np.array(velocities, dtype=np.float64)
    fit = _evaluate(x, fitness)
    evals = len(x)
    pbest, pbest_f = x.copy(), fit.copy()
    g = int(np.argmax(pbest_f))
    history = [float(pbest_f[g])]
    for _ in range(iterations):
        r1, r2 = rng.random(x.shape), rng.random(x.shape)
        v = inertia * v + c1 * r1 * (pbest - x) + c2 * r2 * (pbest[g] - x)
        x = _clip(x + v, upper)
        fit = _evaluate(x, fitness)
        evals += len(x)
        better = fit > pbest_f
        pbest[better], pbest_f[better] = x[better], fit[better]
        g = int(np.argmax(pbest_f))
        history.append(float(pbest_f[g]))
    return SearchResult(pbest[g].copy(), float(pbest_f[g]), history, evals)


def sos_iterate(ecosystem: np.ndarray, fitness: Fitness, iterations: int, rng: np.random.Generator,
                upper: float) -> SearchResult:
    """Mutualism, commensalism and parasitism per organism, each with greedy acceptance."""
    eco = _clip(np.array(ecosystem, dtype=np.float64), upper)
    P, L = eco.shape
    fit = _evaluate(eco, fitness)
    evals = P
    history = [float(fit.max())]

    def other(i: int) -> int:
        j = int(rng.integers(0, P - 1))
        return j + 1 if j >= i else j

    for _ in range(iterations):
        for i in range(P):
            if P < 2:
                break
            best = eco[int(np.argmax(fit))].copy()
            # mutualism
            j = other(i)
            mutual = (eco[i] + eco[j]) / 2.0
            bf1, bf2 = rng.integers(1, 3, size=2)
            cand_i = _clip(eco[i] + rng.uniform(-1, 1, L) * (best - mutual * bf1), upper)
            cand_j = _clip(eco[j] + rng.uniform(-1, 1, L) * (best - mutual * bf2), upper)
            fi, fj = fitness(cand_i), fitness(cand_j)
            evals += 2
            if fi > fit[i]:
                eco[i], fit[i] = cand_i, fi
            if fj > fit[j]:
                eco[j], fit[j] = cand_j, fj
            # commensalism
            j = other(i)
            cand = _clip(eco[i] + rng.uniform(-1, 1, L) * (best - eco[j]), upper)
            fc = fitness(cand)
            evals += 1
            if fc > fit[i]:
                eco[i], fit[i] = cand, fc
            # parasitism
            j = other(i)
            parasite = eco[i].copy()
            dims = rng.random(L) < 0.5
            if not dims.any():
                dims[int(rng.integers(0, L))] = True
            parasite[dims] = rng.uniform(0.0, upper, size=int(dims.sum()))
            parasite = _clip(parasite, upper)
            fp = fitness(parasite)
            evals += 1
            if fp > fit[j]:
                eco[j], fit[j] = parasite, fp
        history.append(float(fit.max()))
    b = int(np.argmax(fit))
    return SearchResult(eco[b].copy(), float(fit[b]), history, evals)


def search(algo: str, length: int, upper: float, fitness: Fitness, evaluations: int,
           rng: np.random.Generator, population: int = POPULATION, seed_genes: np.ndarray | None = None) -> SearchResult:
    """Run ``algo`` from a uniform random population for roughly ``evaluations`` fitness calls."""
    if algo not in ALGORITHMS:
        raise ValueError(f"unknown heuristic {algo!r}; expected one of {ALGORITHMS}")
    pop = rng.uniform(0.0, upper, size=(population, length))
    if seed_genes is not None:
        pop[0] = seed_genes
    rounds = max(0, evaluations // population - 1)
    if algo == "ga":
        return ga_evolve(pop, fitness, rounds, rng, upper)
    if algo == "pso":
        return pso_iterate(pop, fitness, rounds, rng, upper)
    # four fitness calls per organism per iteration
    return sos_iterate(pop, fitness, max(1, rounds // 4), rng, upper)


# ---------------------------------------------------------------------------
# scoring and the exhaustive oracle


def _cost_matrix(tasks: Sequence[Task], entities: Sequence[Entity],
                 cost_fn: Callable[[Entity, Task], float] | None) -> np.ndarray:
    """(N, n) cost of entity i on task j; non-finite costs become prohibitive."""
    cost_fn = cost_fn or (lambda e, t: e.demand)
    C = np.array([[cost_fn(e, t) for e in entities] for t in tasks], dtype=np.float64).reshape(len(tasks), len(entities))
    return np.where(np.isfinite(C), C, 1e18)


def score_assignments(slots: np.ndarray, tasks: Sequence[Task], entities: Sequence[Entity],
                      cost_fn: Callable[[Entity, Task], float] | None = None) -> np.ndarray:
    """Manager return of each row of ``slots`` (K, n) with values 0..N, scored by the completion rule."""
    slots = np.atleast_2d(slots)
    if not tasks:
        return np.zeros(len(slots))
    C = _cost_matrix(tasks, entities, cost_fn)
    R = np.stack([e.resources for e in entities])
    total = np.zeros(len(slots))
    for j, t in enumerate(tasks):
        member = (slots == j + 1).astype(np.float64)
        got = member @ R
        cost = member @ C[j]
        ok = np.all(got >= t.residual - 1e-9, axis=1) & (t.reward - cost >= 0)
        total += np.where(ok, t.reward - cost, 0.0)
    return total


def _groups(entities: Sequence[Entity], C: np.ndarray, exploit_symmetry: bool) -> list[list[int]]:
    """Indices of interchangeable entities: same resources and same cost on every task."""
    if not exploit_symmetry:
        return [[i] for i in range(len(entities))]
    keys: dict[tuple, list[int]] = {}
    for i, e in enumerate(entities):
        key = (tuple(np.round(e.resources, 12)), tuple(np.round(C[:, i], 12)))
        keys.setdefault(key, []).append(i)
    return sorted(keys.values())


def _compositions(size: int, bins: int) -> np.ndarray:
    """All count vectors of length ``bins`` summing to ``size``."""
    out = []
    for cuts in itertools.combinations(range(size + bins - 1), bins - 1):
        prev, counts = -1, []
        for c in cuts:
            counts.append(c - prev - 1)
            prev = c
        counts.append(size + bins - 1 - prev - 1)
        out.append(counts)
    return np.array(out, dtype=np.int64).reshape(-1, bins)


def oracle_size(tasks: Sequence[Task], entities: Sequence[Entity], cost_fn=None, exploit_symmetry: bool = True) -> int:
    avail = [e for e in entities if e.available]
    if not tasks or not avail:
        return 1
    C = _cost_matrix(tasks, avail, cost_fn)
    N = len(tasks)
    return math.prod(math.comb(len(g) + N, N) for g in _groups(avail, C, exploit_symmetry))


def brute_force_optimum(tasks: Sequence[Task], entities: Sequence[Entity],
                        cost_fn: Callable[[Entity, Task], float] | None = None, limit: int = ORACLE_LIMIT,
                        exploit_symmetry: bool = True, chunk: int = 250_000) -> tuple[Allocation, float]:
    """Exhaustive best allocation of available entities to ``tasks``.

    Interchangeable entities are enumerated by counts per task, which is exact
    and shrinks e.g. 10 entities / 5 tasks from 6^10 to ~3e6 configurations.
    Ties go to the lexicographically smallest assignment vector (entities by id,
    0 = unassigned < task 1 < ... < task N).
    """
    avail = sorted((e for e in entities if e.available), key=lambda e: e.id)
    if not tasks or not avail:
        return Allocation(), 0.0
    N = len(tasks)
    if not exploit_symmetry and (N + 2) ** len(avail) > limit:
        raise SizeError(f"(N+2)^n = {N + 2}^{len(avail)} exceeds {limit}")
    C = _cost_matrix(tasks, avail, cost_fn)
    R = np.stack([e.resources for e in avail])
    groups = _groups(avail, C, exploit_symmetry)
    size = math.prod(math.comb(len(g) + N, N) for g in groups)
    if size > limit:
        raise SizeError(f"{size} configurations exceed {limit}")
    req = np.stack([t.residual for t in tasks])
    rewards = np.array([t.reward for t in tasks])
    # per group: counts (M, N+1), resources delivered (M, N, k), cost (M, N)
    parts = []
    for g in groups:
        counts = _compositions(len(g), N + 1)
        tc = counts[:, 1:].astype(np.float64)
        parts.append((counts, tc[:, :, None] * R[g[0]][None, None, :], tc * C[:, g[0]][None, :]))
    split = len(parts)
    inner = 1
    while split > 0 and inner * len(parts[split - 1][0]) <= chunk:
        split -= 1
        inner *= len(parts[split][0])
    split = min(split, len(parts) - 1)

    def combine(ps):
        res, cost = ps[0][1], ps[0][2]
        for _, r, c in ps[1:]:
            res = (res[:, None] + r[None, :]).reshape((-1,) + r.shape[1:])
            cost = (cost[:, None] + c[None, :]).reshape((-1,) + c.shape[1:])
        return res, cost

    in_res, in_cost = combine(parts[split:])
    inner_shape = [len(p[0]) for p in parts[split:]]
    best_val, best_cfgs = 0.0, []
    for outer in itertools.product(*[range(len(p[0])) for p in parts[:split]]):
        res, cost = in_res.copy(), in_cost.copy()
        for gi, oi in enumerate(outer):
            res += parts[gi][1][oi]
            cost += parts[gi][2][oi]
        ok = np.all(res >= req[None] - 1e-9, axis=2) & (rewards[None] - cost >= 0)
        val = np.where(ok, rewards[None] - cost, 0.0).sum(axis=1)
        top = float(val.max())
        if top > best_val + 1e-9:
            best_val, best_cfgs = top, []
        if top >= best_val - 1e-9 and top > 1e-12:
            for flat in np.nonzero(val >= best_val - 1e-9)[0][:10_000]:
                best_cfgs.append(tuple(outer) + np.unravel_index(int(flat), inner_shape))
    if not best_cfgs:
        return Allocation(), 0.0

    def vector(cfg) -> tuple[int, ...]:
        out = [0] * len(avail)
        for g, ci in zip(groups, cfg):
            counts = parts[groups.index(g)][0][ci]
            slots = np.repeat(np.arange(N + 1), counts)
            for member, slot in zip(g, slots):
                out[member] = int(slot)
        return tuple(out)

    best_vec = min(vector(c) for c in best_cfgs)
    alloc = Allocation()
    for i, k in enumerate(best_vec):
        if k:
            alloc.assignments.setdefault(tasks[k - 1].id, []).append(avail[i].id)
    # tasks whose bucket does not complete are dropped from the allocation
    for t in tasks:
        ids = alloc.assignments.get(t.id)
        if ids and score_assignments(np.array([[1 if e.id in ids else 0 for e in avail]]), [t], avail, cost_fn)[0] <= 0:
            del alloc.assignments[t.id]
    return alloc, float(best_val)


# ---------------------------------------------------------------------------
# static single-step optimisation and the rolling re-plan driver


def optimize_static(tasks: Sequence[Task], entities: Sequence[Entity], algo: str, evaluations: int,
                    rng: np.random.Generator, cost_fn=None) -> tuple[Allocation, float, SearchResult]:
    """One-step instance: genes are one slot per entity, fitness is the scored return."""
    N, n = len(tasks), len(entities)
    upper = gene_upper(N)

    def fitness(g: np.ndarray) -> float:
        return float(score_assignments(decode_slots(g, N)[None], tasks, entities, cost_fn)[0])

    res = search(algo, n, upper, fitness, evaluations, rng)
    chrom = Chromosome(res.best, n, N)
    return decode(chrom, 0, tasks, entities), res.best_fitness, res


@dataclass
class ReplanReport:
    episode_return: float
    replans: int
    evaluations: int
    simulated_steps: int


def plan_fitness(env: Env, n: int, N: int, horizon: int, planning_seed: int) -> Fitness:
    """Simulated return of a horizon-long chromosome from a frozen copy of the current state."""
    base = env.clone(seed=planning_seed)

    def fitness(genes: np.ndarray) -> float:
        sim = base.clone(seed=planning_seed)
        chrom = Chromosome(genes, n, N)
        total = 0.0
        for s in range(horizon):
            if sim.done:
                break
            st = sim.state
            total += sim.step(decode(chrom, s, st.tasks, st.entities)).reward
        return total

    return fitness


def rolling_replan(env: Env, algo: str, budget: int, rng: np.random.Generator, horizon: int = 10,
                   interval: int = 10, population: int = POPULATION, planning_seed: int = 0) -> ReplanReport:
    """Play one episode from ``env``'s current state, re-optimising every ``interval`` steps.

    ``budget`` is the number of simulated environment steps allowed for the
    whole episode; it is split evenly over the re-plans.
    """
    spec = env.spec
    n, N = spec.n_entities, spec.max_tasks
    remaining = spec.episode_length - env.state.step
    replans_expected = max(1, math.ceil(remaining / interval))
    evals = max(population, budget // (replans_expected * horizon))
    total, replans, used, sim_steps = 0.0, 0, 0, 0
    chrom = None
    offset = 0
    while not env.done:
        if offset % interval == 0:
            fitness = plan_fitness(env, n, N, horizon, planning_seed + replans)
            res = search(algo, horizon * n, gene_upper(N), fitness, evals, rng)
            chrom = Chromosome(res.best, n, N)
            replans += 1
            used += res.evaluations
            sim_steps += res.evaluations * horizon
        st = env.state
        total += env.step(decode(chrom, offset % interval, st.tasks, st.entities)).reward
        offset += 1
    return ReplanReport(total, replans, used, sim_steps)


def heuristic_episode(spec, algo: str, budget: int, seed: int, env_seed: int, **kw) -> ReplanReport:
    env = Env(spec)
    env.reset(env_seed)
    return rolling_replan(env, algo, budget, np.random.default_rng(seed), planning_seed=seed * 1000 + 17, **kw)


__all__ = [
    "ALGORITHMS", "Chromosome", "EncodingError", "ReplanReport", "SearchResult", "SizeError",
    "brute_force_optimum", "decode", "decode_slots", "ga_evolve", "gene_upper",
    "heuristic_episode", "optimize_static", "oracle_size", "plan_fitness", "pso_iterate", "rolling_replan",
    "score_assignments", "search", "sos_iterate",
]
