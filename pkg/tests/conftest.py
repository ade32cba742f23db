import numpy as np
import pytest

from allocforge.core import Entity, Task
from allocforge.perf import tune_allocator

tune_allocator()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_task(i, reward, req, pos=(0.0, 0.0)):
    return Task(id=i, reward=reward, requirement=np.asarray(req, float), position=np.asarray(pos, float))


def make_entity(i, res, demand=0.0, pos=(0.0, 0.0)):
    return Entity(id=i, resources=np.asarray(res, float), demand=demand, position=np.asarray(pos, float))


def random_instance(rng, n, m, k=2):
    tasks = [make_task(j, float(rng.uniform(1, 10)), rng.integers(0, 4, k), rng.uniform(0, 5, 2)) for j in range(m)]
    ents = [make_entity(i, rng.integers(0, 3, k), float(rng.uniform(0, 3)), rng.uniform(0, 5, 2)) for i in range(n)]
    return tasks, ents


def random_allocation(state, rng, p_assign=0.7):
    """Each free entity joins a random open task with probability ``p_assign``."""
    from allocforge.core import Allocation

    out: dict[int, list[int]] = {}
    if not state.tasks:
        return Allocation()
    for e in state.entities:
        if e.available and rng.random() < p_assign:
            t = state.tasks[int(rng.integers(len(state.tasks)))]
            out.setdefault(t.id, []).append(e.id)
    return Allocation(out)


# acceptance verdicts, echoed in the terminal summary so `pytest | tee` keeps them
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
