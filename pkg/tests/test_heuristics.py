import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from allocforge.core import Allocation, manager_step_reward
from allocforge.envs import Env, builtin_spec
from allocforge.heuristics import (Chromosome, EncodingError, SizeError, brute_force_optimum, decode, decode_slots,
                                   ga_evolve, gene_upper, heuristic_episode, optimize_static, pso_iterate,
                                   rolling_replan, score_assignments, search, sos_iterate)

from conftest import make_entity, make_task, random_instance


def naive_optimum(tasks, ents):
    """Plain enumeration over (N+1)^n, scored by the core reward."""
    best = 0.0
    for slots in itertools.product(range(len(tasks) + 1), repeat=len(ents)):
        alloc = Allocation()
        for e, k in zip(ents, slots):
            if k:
                alloc.assignments.setdefault(tasks[k - 1].id, []).append(e.id)
        best = max(best, manager_step_reward(tasks, alloc, ents))
    return best


# ---------------------------------------------------------------------------
# encoding


def test_decode_examples():
    assert decode_slots([2.7], 3)[0] == 2
    assert decode_slots([0.4], 3)[0] == 0
    assert decode_slots([4.2], 3)[0] == 0
    assert decode_slots([1.0, 3.999], 3).tolist() == [1, 3]
    with pytest.raises(EncodingError):
        decode_slots([5.0], 3)
    with pytest.raises(EncodingError):
        decode_slots([-0.1], 3)


def test_decode_uses_step_slice_and_task_order():
    tasks = [make_task(10, 1, [1]), make_task(20, 1, [1])]
    ents = [make_entity(i, [1]) for i in range(3)]
    genes = np.array([1.5, 2.5, 0.5, 2.1, 2.2, 3.5])
    a0 = decode(Chromosome(genes, 3, 2), 0, tasks, ents)
    a1 = decode(Chromosome(genes, 3, 2), 1, tasks, ents)
    assert a0.assignments == {10: [0], 20: [1]}
    assert a1.assignments == {20: [0, 1]}


def test_decode_skips_missing_tasks_and_busy_entities():
    tasks = [make_task(0, 1, [1])]
    ents = [make_entity(i, [1]) for i in range(2)]
    ents[1].committed_to = 99
    alloc = decode(Chromosome(np.array([2.5, 1.5]), 2, 3), 0, tasks, ents)
    assert alloc.assignments == {}


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), N=st.integers(1, 6), n=st.integers(1, 12))
def test_decode_always_valid(seed, N, n):
    rng = np.random.default_rng(seed)
    genes = rng.uniform(0, gene_upper(N), size=n)
    tasks = [make_task(j, 1, [1]) for j in range(int(rng.integers(0, N + 1)))]
    ents = [make_entity(i, [1]) for i in range(n)]
    alloc = decode(Chromosome(genes, n, N), 0, tasks, ents)
    alloc.validate(task_ids=[t.id for t in tasks], entity_ids=[e.id for e in ents])


# ---------------------------------------------------------------------------
# optimizers


def quad(x):
    return -float(np.sum((x - 1.3) ** 2))


def test_ga_fixed_point():
    pop = np.tile([1.0, 2.0, 0.5], (10, 1))
    res = ga_evolve(pop, quad, 20, np.random.default_rng(0), upper=4.0, mutation=0.0, crossover=0.0)
    assert np.array_equal(res.best, [1.0, 2.0, 0.5])
    assert res.history == [res.history[0]] * 21


@pytest.mark.parametrize("algo", ["ga", "pso", "sos"])
def test_best_so_far_monotone(algo):
    res = search(algo, 6, 4.0, quad, 3000, np.random.default_rng(1))
    assert all(b >= a for a, b in zip(res.history, res.history[1:]))


def test_pso_fixed_point():
    x = np.tile([1.3, 1.3], (5, 1))
    res = pso_iterate(x, quad, 10, np.random.default_rng(0), upper=4.0)
    assert np.array_equal(res.best, [1.3, 1.3])


def test_pso_stays_in_range():
    seen = []

    def spy(x):
        seen.append(x.copy())
        return float(np.sum(x))  # pushes every particle against the upper wall

    pso_iterate(np.random.default_rng(0).uniform(0, 5, (20, 4)), spy, 30, np.random.default_rng(1), upper=5.0,
                velocities=np.full((20, 4), 100.0))
    allx = np.array(seen)
    assert allx.min() >= 0.0 and allx.max() < 5.0


def test_sos_fixed_point_and_range():
    seen = []

    def spy(x):
        seen.append(x.copy())
        return quad(x)

    eco = np.tile([1.3, 1.3, 1.3], (6, 1))
    res = sos_iterate(eco, spy, 10, np.random.default_rng(0), upper=4.0)
    assert np.array_equal(res.best, [1.3, 1.3, 1.3]) and res.best_fitness == 0.0
    allx = np.array(seen)
    assert allx.min() >= 0.0 and allx.max() < 4.0


def test_unknown_algorithm():
    with pytest.raises(ValueError):
        search("annealing", 3, 4.0, quad, 100, np.random.default_rng(0))


def test_ga_single_entity_single_task_reaches_oracle():
    tasks, ents = [make_task(0, 3.0, [1])], [make_entity(0, [1], 1.0)]
    for seed in range(5):
        pop = np.random.default_rng(seed).uniform(0, gene_upper(1), (100, 1))

        def fit(g):
            return float(score_assignments(decode_slots(g, 1)[None], tasks, ents)[0])

        assert ga_evolve(pop, fit, 50, np.random.default_rng(seed), gene_upper(1)).best_fitness == 2.0


@pytest.mark.parametrize("algo", ["ga", "pso", "sos"])
def test_heuristics_match_oracle_on_tiny_instances(algo):
    hits = 0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        tasks, ents = random_instance(rng, 5, 2)
        _, oracle = brute_force_optimum(tasks, ents)
        _, got, _ = optimize_static(tasks, ents, algo, 5000, np.random.default_rng(seed))
        assert got <= oracle + 1e-9
        hits += abs(got - oracle) < 1e-9
    assert hits >= 4


# ---------------------------------------------------------------------------
# oracle


def test_oracle_examples():
    ents = [make_entity(0, [1], 1.0), make_entity(1, [1], 1.0)]
    alloc, val = brute_force_optimum([make_task(0, 3.0, [1])], ents)
    assert val == 2.0
    assert alloc.assignments == {0: [1]}  # lexicographically smallest: (0, 1) < (1, 0)
    _, val = brute_force_optimum([make_task(0, 0.5, [1])], ents)
    assert val == 0.0
    alloc, val = brute_force_optimum([], ents)
    assert val == 0.0 and alloc.assignments == {}


@pytest.mark.parametrize("seed", range(8))
def test_oracle_matches_naive_enumeration(seed):
    rng = np.random.default_rng(seed)
    tasks, ents = random_instance(rng, int(rng.integers(1, 6)), int(rng.integers(1, 4)))
    alloc, val = brute_force_optimum(tasks, ents)
    assert val == pytest.approx(naive_optimum(tasks, ents), abs=1e-9)
    assert manager_step_reward(tasks, alloc, ents) == pytest.approx(val, abs=1e-9)
    _, plain = brute_force_optimum(tasks, ents, exploit_symmetry=False)
    assert plain == pytest.approx(val, abs=1e-9)


def test_oracle_refuses_large():
    tasks = [make_task(j, 1, [1]) for j in range(5)]
    ents = [make_entity(i, [1], float(i)) for i in range(12)]
    with pytest.raises(SizeError):
        brute_force_optimum(tasks, ents, exploit_symmetry=False)


def test_oracle_on_retain():
    env = Env(builtin_spec("retain"))
    state = env.reset(0)
    alloc, val = brute_force_optimum(state.tasks, state.entities, cost_fn=env.cost)
    assert val == pytest.approx(8.5)
    assert alloc.assignments[state.tasks[-1].id] == [0]


# ---------------------------------------------------------------------------
# rolling re-plan


def test_replans_every_ten_steps():
    spec = builtin_spec("rbf-small").replace(episode_length=50)
    rep = heuristic_episode(spec, "ga", 0, seed=0, env_seed=0)
    assert rep.replans == 5


def test_replan_on_retain_reaches_oracle():
    spec = builtin_spec("retain")
    env = Env(spec)
    env.reset(0)
    rep = rolling_replan(env, "ga", 5_000, np.random.default_rng(0), horizon=1)
    assert rep.episode_return == pytest.approx(8.5)


def test_replan_deterministic():
    spec = builtin_spec("rbf-small")
    a = heuristic_episode(spec, "pso", 2000, seed=3, env_seed=1)
    b = heuristic_episode(spec, "pso", 2000, seed=3, env_seed=1)
    assert a == b
