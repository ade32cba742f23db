import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from allocforge import autodiff as ad
from allocforge.allocator import (AllocatorParams, FeatureScale, ObsBatch, ParamsConfig, observe, one_hot_actions,
                                  q_total, sample_preassign, select_for_task)
from allocforge.autodiff import ParamBlock, Tape
from allocforge.envs import Env, builtin_spec
from allocforge.trainers import (ExplorationSchedule, ReplayBuffer, RunningMean, TrainConfig, WorkerAgents,
                                 actor_objective, bootstrap_values, candidate_actions, ddpg_worker_update,
                                 evaluate, reinforce_loss, sac_actor_loss, select_policy_update, soft_update,
                                 stack_observations, td_loss, train_manager, worker_obs_dim, worker_observations)

from conftest import make_entity, make_task, random_instance


def small_params(mode="two_stage", seed=0, dim=5, **kw):
    return AllocatorParams(ParamsConfig(dim, dim, d=8, h=8, hidden=(8,), mode=mode, **kw), np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# replay and schedules


def test_replay_capacity_and_overwrite():
    buf = ReplayBuffer(1000)
    for i in range(1500):
        buf.push(i)
        assert len(buf) <= 1000
    assert set(buf.records) == set(range(500, 1500))


def test_replay_sample_without_replacement(rng):
    buf = ReplayBuffer(50)
    for i in range(50):
        buf.push(i)
    batch = buf.sample(32, rng)
    assert len(set(batch)) == 32


@settings(max_examples=50, deadline=None)
@given(start=st.floats(0.1, 1.0), floor=st.floats(0.0, 0.1), decay=st.floats(0.9, 1.0), steps=st.integers(0, 3000))
def test_schedule_closed_form(start, floor, decay, steps):
    s = ExplorationSchedule(start, floor, decay)
    prev = s.current
    for _ in range(min(steps, 50)):
        cur = s.step()
        assert floor <= cur <= prev
        prev = cur
    s.steps = steps
    assert s.current == max(floor, start * decay**steps)


# ---------------------------------------------------------------------------
# losses


def test_sac_actor_loss_examples():
    assert sac_actor_loss(0.0, 7.0, 0.05) == -7.0
    assert sac_actor_loss(-3.0, 2.5, 0.0) == -2.5
    assert sac_actor_loss(-2.0, 1.0, 0.05) == pytest.approx(-1.1)


def test_td_loss_examples():
    assert float(td_loss(ad.as_tensor([1.0]), [1.0], [123.0], [True], 0.98).value) == 0.0
    assert float(td_loss(ad.as_tensor([9.8]), [0.0], [10.0], [False], 0.98).value) == pytest.approx(0.0, abs=1e-24)
    assert float(td_loss(ad.as_tensor([0.0]), [1.0], [0.0], [True], 0.98).value) == 0.5
    with pytest.raises(ValueError):
        td_loss(ad.as_tensor([]), [], [], [], 0.98)


def test_soft_update_examples():
    on, tg = ParamBlock("a", np.ones(3)), ParamBlock("a", np.zeros(3))
    soft_update([on], [tg], 0.005)
    assert np.allclose(tg.value, 0.005)
    soft_update([on], [tg], 1.0)
    assert np.array_equal(tg.value, on.value)
    before = tg.value.copy()
    on.value[...] = 5.0
    soft_update([on], [tg], 0.0)
    assert np.array_equal(tg.value, before)
    with pytest.raises(ad.DimensionError):
        soft_update([on], [ParamBlock("a", np.zeros(2))], 0.5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 1000), tau=st.floats(0.001, 0.999))
def test_soft_update_contracts(seed, tau):
    rng = np.random.default_rng(seed)
    on, tg = ParamBlock("a", rng.normal(size=4)), ParamBlock("a", rng.normal(size=4))
    gap = np.abs(tg.value - on.value)
    soft_update([on], [tg], tau)
    assert np.all(np.abs(tg.value - on.value) < gap)


def test_reinforce_examples():
    lp = ParamBlock("lp", np.array(-1.0))
    assert float(reinforce_loss([lp], 2.0).value) == 2.0
    with Tape() as tape:
        loss = reinforce_loss([lp * 1.0], 0.0)
    ad.backward(tape, loss)
    assert lp.grad == 0.0


def _trace(params, seed):
    task = make_task(0, 5.0, [2, 1])
    cands = [make_entity(i, [1, 1]) for i in range(3)]
    return select_for_task(task, cands, params, rng=np.random.default_rng(seed))


def test_select_update_zero_gradient_when_profit_equals_baseline():
    p = small_params()
    base = RunningMean()
    base.update(3.0)
    with Tape() as tape:
        tr = _trace(p, 0)
        tr.profit = 3.0
        tr.value = None
        loss, policy = select_policy_update([tr], base, update_baseline=False)
    ad.backward(tape, loss)
    assert policy == 0.0
    assert all(np.all(b.grad == 0) for b in p.select_blocks())


def test_value_head_fits_constant_profit():
    p = small_params()
    for step in range(1000):
        with Tape() as tape:
            tr = _trace(p, step)
            tr.profit = 2.5
            tr.logp_tensors = []
            loss, _ = select_policy_update([tr])
        ad.backward(tape, loss)
        ad.adam_step(p.value_blocks(), 1e-2)
        ad.zero_grad(p.blocks())
    assert float(np.sum(_trace(p, 0).value.value)) == pytest.approx(2.5, abs=1e-3)


def test_actor_objective_gradients():
    rng = np.random.default_rng(0)
    p = small_params(dim=5)
    items = []
    for b in range(3):
        tasks, ents = random_instance(rng, 4 + b, 3)
        o = observe(tasks, ents, p, FeatureScale())
        items.append(o)
    batch = stack_observations(p, items)
    with ad.frozen(p.critic_blocks()):
        rep = ad.grad_check(lambda: actor_objective(p, batch, 0.05), p.actor_blocks(), atol=1e-6)
    assert rep.max_rel_error < 1e-4


# ---------------------------------------------------------------------------
# critic bootstrap


def test_bootstrap_exact_enumeration_on_tiny_instance(rng):
    p, target = small_params(seed=1), small_params(seed=2)
    tasks, ents = random_instance(rng, 3, 3)
    o = observe(tasks, ents, p, FeatureScale())
    got = bootstrap_values(p, target, [o], rng, samples=15, enumerate_limit=32)[0]
    batch = ObsBatch.stack([(o.ent, o.ent_mask, o.task)])
    best = max(float(q_total(target, batch, one_hot_actions(np.array([c]), 3)).value[0])
               for c in itertools.product(range(3), repeat=3))
    assert got == pytest.approx(best, abs=1e-12)


def test_candidate_actions_sampled_when_large(rng):
    probs = np.full((6, 3), 1 / 3)
    acts = candidate_actions(probs, np.ones(6, bool), 3, rng, samples=15, enumerate_limit=32)
    assert acts.shape == (16, 6) and np.all((acts >= 0) & (acts < 3))


def test_bootstrap_zero_without_next_state(rng):
    p = small_params()
    assert np.array_equal(bootstrap_values(p, p.copy(), [None, None], rng), [0.0, 0.0])


# ---------------------------------------------------------------------------
# workers


def test_worker_bids_deterministic_without_noise(rng):
    agent = WorkerAgents(4, 6, rng, hidden=(8,))
    obs = rng.normal(size=(4, 6))
    a, b = agent.act(obs, 0.0, rng), agent.act(obs, 0.0, rng)
    assert np.array_equal(a, b) and np.all(a >= 0)
    assert np.all(agent.act(obs, 5.0, rng) >= 0)


def test_worker_critic_goes_to_zero_on_unselected(rng):
    agent = WorkerAgents(2, 3, rng, hidden=(8,), lr=1e-2, gamma=0.0)
    batch = [{"obs": rng.normal(size=(2, 3)), "bids": rng.uniform(0, 2, 2), "rewards": np.zeros(2),
              "next_obs": rng.normal(size=(2, 3)), "done": True} for _ in range(16)]
    first = ddpg_worker_update(agent, batch)[1]
    for _ in range(400):
        last = ddpg_worker_update(agent, batch)[1]
    assert last < 1e-3 < first


def test_worker_reward_is_bid():
    spec = builtin_spec("rbf-small").replace(worker_mode=True)
    env = Env(spec)
    state = env.reset(3)
    env.set_bids({e.id: 3.0 for e in state.entities})
    task = state.tasks[0]
    from allocforge.core import Allocation
    need = task.requirement.copy()
    chosen = []
    for e in state.entities:
        if np.any(need > 0):
            chosen.append(e.id)
            need = np.maximum(0, need - e.resources)
    r = env.step(Allocation({task.id: chosen}))
    if task.id in r.completed:
        assert r.worker_rewards == {i: 3.0 for i in chosen}


def test_worker_observation_width(rng):
    spec = builtin_spec("rbf-small")
    state = Env(spec).reset(0)
    obs = worker_observations(state, FeatureScale.for_spec(spec))
    assert obs.shape == (spec.n_entities, worker_obs_dim(spec.resource_dim))


# ---------------------------------------------------------------------------
# training loop


def test_zero_iterations_leave_params_untouched():
    spec = builtin_spec("retain")
    p = small_params(dim=spec.resource_dim + 3)
    before = [b.value.copy() for b in p.blocks()]
    assert train_manager(spec, p, TrainConfig(iterations=0), seed=0) == []
    assert all(np.array_equal(a, b.value) for a, b in zip(before, p.blocks()))


def test_full_exploration_is_uniform():
    rng = np.random.default_rng(0)
    tasks, ents = random_instance(rng, 30, 4)
    p = small_params()
    # sharpen the policy so non-uniform picks would be obvious
    for b in p.actor_blocks():
        b.value *= 20
    o = observe(tasks, ents, p, FeatureScale())
    counts = np.zeros(4)
    for s in range(100):
        pa = sample_preassign(p, o, np.random.default_rng(s), epsilon=1.0)
        counts += np.bincount(pa.choices, minlength=4)
    assert stats.chisquare(counts).pvalue > 0.01


def test_training_is_seed_deterministic():
    spec = builtin_spec("retain")
    cfg = TrainConfig(iterations=40, batch_size=8, wall_clock=False)
    curves = []
    for _ in range(2):
        p = small_params(dim=spec.resource_dim + 3)
        curves.append([repr(r.row()) for r in train_manager(spec, p, cfg, seed=5)])
    assert curves[0] == curves[1]
    assert len(curves[0]) == 40


def test_evaluate_does_not_update(rng):
    spec = builtin_spec("retain")
    p = small_params(dim=spec.resource_dim + 3)
    before = [b.value.copy() for b in p.blocks()]
    evaluate(spec, p, episodes=3, seed=1)
    assert all(np.array_equal(a, b.value) for a, b in zip(before, p.blocks()))
