import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from allocforge import autodiff as ad
from allocforge.allocator import (AllocatorParams, FeatureScale, FixedShapeError, MixWeights, Mode, NoTasksError,
                                  ParamsConfig, allocate, amix_total, pre_assign_policy, pre_assign_values,
                                  select_for_task, shn_generate)
from allocforge.envs import Env, RetainDynamics, builtin_spec

from conftest import make_entity, make_task, random_instance

K = 2
DIM = K + 3


def params_for(mode="two_stage", d=16, h=16, hidden=(16,), seed=0, fixed_n=0, fixed_m=0):
    cfg = ParamsConfig(DIM, DIM, d=d, h=h, hidden=hidden, mode=mode, fixed_n=fixed_n, fixed_m=fixed_m)
    return AllocatorParams(cfg, np.random.default_rng(seed))


def _set_linear(net, w, b):
    (W, B), = net.layers
    W.value[...] = w
    B.value[...] = b


# ---------------------------------------------------------------------------
# pre-assign heads


def test_single_task_rows_are_one(rng):
    tasks, ents = random_instance(rng, 6, 1)
    assert np.array_equal(pre_assign_policy(ents, tasks, params_for()), np.ones((6, 1)))


def test_zero_embeddings_give_uniform_rows(rng):
    p = params_for(hidden=())
    _set_linear(p.f_h, 0.0, 0.0)
    tasks, ents = random_instance(rng, 4, 3)
    assert np.allclose(pre_assign_policy(ents, tasks, p), 1 / 3)


def test_hand_set_scores_give_closed_form_softmax():
    # d = 1: entity embedding 1, task embedding = reward feature -> scores [ln 2, 0]
    p = params_for(d=1, hidden=())
    _set_linear(p.f_h, 0.0, 1.0)
    w = np.zeros((DIM, 1))
    w[-1, 0] = 1.0
    _set_linear(p.f_g, w, 0.0)
    tasks = [make_task(0, math.log(2.0), [1, 0]), make_task(1, 0.0, [0, 1])]
    ents = [make_entity(0, [1, 0]), make_entity(1, [0, 1])]
    assert np.allclose(pre_assign_policy(ents, tasks, p), [[2 / 3, 1 / 3]] * 2, atol=1e-15)


def test_values_hand_evaluation():
    # d = 1: o = 2 for every entity, q = reward - 1 -> q columns [3, -1], values 2 * q
    p = params_for(d=1, hidden=())
    _set_linear(p.f_o, 0.0, 2.0)
    w = np.zeros((DIM, 1))
    w[-1, 0] = 1.0
    _set_linear(p.f_q, w, -1.0)
    tasks = [make_task(0, 4.0, [1, 0]), make_task(1, 0.0, [0, 1])]
    assert np.allclose(pre_assign_values([make_entity(0, [1, 1])], tasks, p), [[6.0, -2.0]], atol=1e-15)


def test_zero_critic_embedding_gives_zero_row(rng):
    p = params_for(hidden=())
    _set_linear(p.f_o, 0.0, 0.0)
    tasks, ents = random_instance(rng, 3, 4)
    assert np.array_equal(pre_assign_values(ents, tasks, p), np.zeros((3, 4)))


@pytest.mark.parametrize("n", [1, 5, 100])
def test_value_shape(n, rng):
    tasks, ents = random_instance(rng, n, 3)
    assert pre_assign_values(ents, tasks, params_for()).shape == (n, 3)


def test_no_tasks_error(rng):
    _, ents = random_instance(rng, 3, 1)
    with pytest.raises(NoTasksError):
        pre_assign_policy(ents, [], params_for())


@pytest.mark.parametrize("n", [1, 3, 50, 100])
@pytest.mark.parametrize("m", [1, 2, 10])
def test_rows_stochastic(n, m):
    rng = np.random.default_rng(n * 31 + m)
    tasks, ents = random_instance(rng, n, m)
    p = pre_assign_policy(ents, tasks, params_for(seed=n + m))
    assert p.shape == (n, m)
    assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000), n=st.integers(1, 12), m=st.integers(1, 8))
def test_task_permutation_equivariance(seed, n, m):
    rng = np.random.default_rng(seed)
    tasks, ents = random_instance(rng, n, m)
    perm = rng.permutation(m)
    p = params_for(seed=seed % 7)
    base_pi, base_q = pre_assign_policy(ents, tasks, p), pre_assign_values(ents, tasks, p)
    shuffled = [tasks[j] for j in perm]
    assert np.max(np.abs(pre_assign_policy(ents, shuffled, p) - base_pi[:, perm])) <= 1e-12
    assert np.max(np.abs(pre_assign_values(ents, shuffled, p) - base_q[:, perm])) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000), n=st.integers(2, 20))
def test_entity_row_independence(seed, n):
    rng = np.random.default_rng(seed)
    tasks, ents = random_instance(rng, n, 3)
    p = params_for(seed=1)
    full = pre_assign_policy(ents, tasks, p)
    keep = sorted(rng.choice(n, size=max(1, n // 2), replace=False))
    sub = pre_assign_policy([ents[i] for i in keep], tasks, p)
    assert np.array_equal(sub, full[keep])


def test_unseen_task_features(rng):
    p = params_for()
    ents = random_instance(rng, 5, 1)[1]
    odd = [make_task(0, 1e4, [50, 0.1], (-300.0, 77.0)), make_task(1, 0.0, [0, 0])]
    pi = pre_assign_policy(ents, odd, p)
    assert np.all(np.isfinite(pi)) and np.allclose(pi.sum(axis=1), 1.0)


# ---------------------------------------------------------------------------
# hypernetwork and mixer


@pytest.mark.parametrize("n", [1, 100])
def test_shn_shapes(n, rng):
    p = params_for(h=64)
    mix = shn_generate(random_instance(rng, n, 1)[1], p)
    assert mix.W.shape == (n, 64) and mix.b.shape == (n,)
    assert np.all(mix.W >= 0)


def test_shn_duplicate_entity_gets_duplicate_row(rng):
    p = params_for()
    ents = random_instance(rng, 4, 1)[1]
    dup = ents[2].copy()
    dup.id = 99
    mix = shn_generate(ents + [dup], p)
    assert mix.W.shape[0] == 5
    assert np.allclose(mix.W[4], mix.W[2], atol=1e-14) and mix.b[4] == pytest.approx(mix.b[2], abs=1e-14)


def test_amix_zero_values_give_output_bias():
    p = params_for(h=8)
    mix = MixWeights(np.abs(np.random.default_rng(0).normal(size=(3, 8))), np.zeros(3))
    assert amix_total(np.zeros(3), mix, p) == pytest.approx(float(p.amix_b.value[0]))


def test_amix_hand_evaluation():
    p = params_for(h=1)
    p.amix_w.value[...] = 1.0
    p.amix_b.value[...] = 0.0
    assert amix_total([1.0, 2.0, 3.0], MixWeights(np.ones((3, 1)), np.zeros(3)), p) == pytest.approx(6.0)


def test_amix_length_mismatch():
    p = params_for(h=2)
    with pytest.raises(ad.DimensionError):
        amix_total([1.0, 2.0], MixWeights(np.ones((3, 2)), np.zeros(3)), p)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 10), i=st.integers(0, 9))
def test_amix_monotone(seed, n, i):
    rng = np.random.default_rng(seed)
    p = params_for(h=8, seed=seed % 5)
    p.amix_w.value[...] = rng.normal(size=p.amix_w.value.shape)
    mix = shn_generate(random_instance(rng, n, 1)[1], p)
    q = rng.normal(size=n)
    bumped = q.copy()
    bumped[i % n] += 1.0
    assert amix_total(bumped, mix, p) >= amix_total(q, mix, p) - 1e-12


# ---------------------------------------------------------------------------
# select


def test_select_single_forced_pick():
    tr = select_for_task(make_task(0, 5.0, [2]), [make_entity(3, [2])], params_for_1d(), rng=np.random.default_rng(0))
    assert tr.picks == [3] and len(tr.log_probs) == 1 and tr.log_probs[0] == 0.0


def params_for_1d():
    return AllocatorParams(ParamsConfig(4, 4, d=8, h=8, hidden=(8,)), np.random.default_rng(0))


def test_select_two_picks_clamp():
    tr = select_for_task(make_task(0, 5.0, [3]), [make_entity(1, [2]), make_entity(2, [2])], params_for_1d(),
                         rng=np.random.default_rng(0))
    assert sorted(tr.picks) == [1, 2]


def test_select_empty_pool():
    tr = select_for_task(make_task(0, 5.0, [3]), [], params_for_1d())
    assert tr.picks == [] and not tr.completed


def test_select_ties_go_to_lowest_id():
    p = params_for_1d()
    p.v.value[...] = 0.0
    ents = [make_entity(7, [1]), make_entity(2, [1]), make_entity(5, [1])]
    assert select_for_task(make_task(0, 5.0, [1]), ents, p, greedy=True).picks == [2]


def test_select_skips_infinite_cost():
    ents = [make_entity(1, [1]), make_entity(2, [1])]
    for s in range(10):
        tr = select_for_task(make_task(0, 5.0, [1]), ents, params_for_1d(), rng=np.random.default_rng(s),
                             costs=[math.inf, 0.0])
        assert tr.picks == [2]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(0, 8))
def test_select_termination_and_monotone_residual(seed, n):
    rng = np.random.default_rng(seed)
    task = make_task(0, 10.0, rng.integers(0, 5, K))
    cands = [make_entity(i, rng.integers(0, 3, K)) for i in range(n)]
    tr = select_for_task(task, cands, params_for(), rng=rng)
    assert len(tr.picks) <= n and len(set(tr.picks)) == len(tr.picks)
    residual = task.residual.copy()
    by_id = {e.id: e for e in cands}
    for k, eid in enumerate(tr.picks):
        assert np.any(residual > 0)
        nxt = np.maximum(0.0, residual - by_id[eid].resources)
        assert np.all(nxt <= residual)
        residual = nxt
    assert np.all(residual == 0) or len(tr.picks) == n


# ---------------------------------------------------------------------------
# allocate


def _retain():
    spec = builtin_spec("retain")
    env = Env(spec)
    state = env.reset(0)
    dim = spec.resource_dim + 3
    return spec, env, state, dim


def test_retain_perfect_preassign_completes_everything():
    spec, env, state, dim = _retain()
    p = AllocatorParams(ParamsConfig(dim, dim, d=8, h=8, hidden=(8,)), np.random.default_rng(0))
    sets = RetainDynamics.best_sets(spec)
    route = np.zeros(len(state.entities), dtype=np.int64)
    for t, members in enumerate(sets):
        for e in members:
            route[e] = t
    route[0] = len(sets) - 1
    res = allocate(state.tasks, state.entities, p, scale=FeatureScale.for_spec(spec), cost_fn=env.cost,
                   rng=np.random.default_rng(0), preassign=route)
    assert all(tr.completed for tr in res.traces)
    ids = [t.id for t in state.tasks]
    assert env.step(res.allocation).completed == ids


def test_sequential_trap_when_almighty_taken_first():
    spec, env, state, dim = _retain()
    p = AllocatorParams(ParamsConfig(dim, dim, d=8, h=8, hidden=(8,), mode="seq_pre"), np.random.default_rng(0))
    trapped = 0
    for s in range(60):
        res = allocate(state.tasks, state.entities, p, scale=FeatureScale.for_spec(spec), cost_fn=env.cost,
                       rng=np.random.default_rng(s))
        first = res.traces[0]
        if 0 in first.picks and first.completed:
            trapped += 1
            assert not res.traces[-1].completed
    assert trapped > 0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), mode=st.sampled_from([m.value for m in Mode]))
def test_allocate_validity_all_modes(seed, mode):
    rng = np.random.default_rng(seed)
    tasks, ents = random_instance(rng, 6, 3)
    p = params_for(mode=mode, fixed_n=6, fixed_m=4)
    res = allocate(tasks, ents, p, rng=rng, epsilon=0.3)
    res.allocation.validate([t.id for t in tasks], [e.id for e in ents])
    assert set(res.allocation.assignments) | res.allocation.abandoned == {t.id for t in tasks}


@pytest.mark.parametrize("mode", ["no_tam", "no_amix"])
def test_fixed_shape_modes_reject_new_sizes(mode, rng):
    p = params_for(mode=mode, fixed_n=6, fixed_m=3)
    tasks, ents = random_instance(rng, 6, 3)
    allocate(tasks, ents, p, rng=rng)
    with pytest.raises(FixedShapeError):
        allocate(tasks, ents[:5], p, rng=rng)
    more_tasks, _ = random_instance(rng, 6, 4)
    with pytest.raises(FixedShapeError):
        allocate(more_tasks, ents, p, rng=rng)


@pytest.mark.parametrize("mode", ["two_stage", "seq_pre", "rand_pre"])
def test_size_free_modes_ignore_recorded_shape(mode, rng):
    # checkpoints record the training size; only fixed-shape modes may use it
    p = params_for(mode=mode, fixed_n=4, fixed_m=2)
    tasks, ents = random_instance(rng, 9, 5)
    res = allocate(tasks, ents, p, rng=rng)
    res.allocation.validate([t.id for t in tasks], [e.id for e in ents])


def test_params_checkpoint_roundtrip(tmp_path):
    p = params_for(mode="no_amix", fixed_n=4, fixed_m=2)
    scale = FeatureScale(3.0, 2.0, 7.0)
    p.save(tmp_path / "ck.txt", scale)
    q, s2 = AllocatorParams.load(tmp_path / "ck.txt")
    assert s2 == scale and q.mode is Mode.NO_AMIX
    for a, b in zip(p.blocks(), q.blocks()):
        assert a.name == b.name and np.array_equal(a.value, b.value)


def test_all_entities_committed():
    rng = np.random.default_rng(0)
    tasks, ents = random_instance(rng, 4, 2)
    for e in ents:
        e.committed_to = 99
    p = AllocatorParams(ParamsConfig(5, 5, d=8, h=8, hidden=(8,)), rng)
    res = allocate(tasks, ents, p, rng=rng)
    assert res.allocation.entity_ids() == []
    assert len(res.preassign.choices) == 0
