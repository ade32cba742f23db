import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from allocforge.core import (Allocation, InvalidAllocationError, completed_tasks, completion_check,
                             manager_step_reward, resource_vector, task_profit)

from conftest import make_entity, make_task, random_instance


def test_task_profit_examples():
    t = make_task(0, 10.0, [1])
    assert task_profit(t, [make_entity(1, [1], 2.0), make_entity(2, [1], 3.0)]) == 5.0
    assert task_profit(t, []) == 10.0
    assert task_profit(make_task(0, 4.0, [1]), [make_entity(1, [1], 2.0), make_entity(2, [1], 3.0)]) == -1.0


def test_task_profit_does_not_mutate():
    t, e = make_task(0, 10.0, [1]), make_entity(1, [1], 2.0)
    task_profit(t, [e])
    assert t.reward == 10.0 and e.demand == 2.0


def test_completion_check_examples():
    # profit 3 in both cases: reward 3, zero demand
    t = make_task(0, 3.0, [2, 1])
    assert completion_check(t, [make_entity(1, [1, 1]), make_entity(2, [1, 0])])
    assert not completion_check(t, [make_entity(1, [1, 1])])
    # sufficient but unprofitable -> abandoned
    assert not completion_check(make_task(0, 1.0, [1]), [make_entity(1, [1], 2.0)])


def test_manager_step_reward_examples():
    tasks = [make_task(0, 6.0, [1]), make_task(1, 9.0, [1])]
    ents = [make_entity(0, [1], 1.0), make_entity(1, [1], 2.0)]
    assert manager_step_reward(tasks, Allocation({0: [0], 1: [1]}), ents) == 12.0
    assert manager_step_reward(tasks, Allocation({0: [0]}, {1}), ents) == 5.0
    assert manager_step_reward(tasks, Allocation({}, {0, 1}), ents) == 0.0


def test_unknown_ids_rejected():
    tasks, ents = [make_task(0, 1.0, [1])], [make_entity(0, [1])]
    with pytest.raises(InvalidAllocationError):
        manager_step_reward(tasks, Allocation({5: [0]}), ents)
    with pytest.raises(InvalidAllocationError):
        manager_step_reward(tasks, Allocation({0: [7]}), ents)


def test_allocation_validity():
    with pytest.raises(InvalidAllocationError):
        Allocation({0: [1], 1: [1]}).validate()
    with pytest.raises(InvalidAllocationError):
        Allocation({0: [1]}, {0}).validate()


def test_resource_vector_rejects_negative():
    with pytest.raises(ValueError):
        resource_vector([1.0, -0.5])
    with pytest.raises(ValueError):
        make_entity(0, [1], demand=-1.0)


def test_task_residual_starts_at_requirement():
    t = make_task(0, 1.0, [2, 3])
    assert np.array_equal(t.residual, t.requirement)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 8), m=st.integers(1, 4))
def test_reward_accounting_identity(seed, n, m):
    # independent recomputation: profit of every task whose summed resources cover it with profit >= 0
    rng = np.random.default_rng(seed)
    tasks, ents = random_instance(rng, n, m)
    slots = rng.integers(-1, m, n)
    alloc = Allocation({j: [i for i in range(n) if slots[i] == j] for j in range(m)})
    expected = 0.0
    for j, t in enumerate(tasks):
        chosen = [ents[i] for i in range(n) if slots[i] == j]
        got = sum((e.resources for e in chosen), np.zeros(2))
        profit = t.reward - sum(e.demand for e in chosen)
        if np.all(got >= t.requirement) and profit >= 0:
            expected += profit
    assert manager_step_reward(tasks, alloc, ents) == pytest.approx(expected, abs=1e-12)
    assert set(completed_tasks(tasks, alloc, ents)) == {
        j for j, t in enumerate(tasks)
        if completion_check(t, [ents[i] for i in range(n) if slots[i] == j])}


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_completion_monotone_under_free_entities(seed):
    rng = np.random.default_rng(seed)
    tasks, ents = random_instance(rng, 4, 1)
    chosen = [e for e in ents if rng.random() < 0.6]
    extra = make_entity(99, rng.integers(0, 3, 2), 0.0)
    if completion_check(tasks[0], chosen):
        assert completion_check(tasks[0], chosen + [extra])
