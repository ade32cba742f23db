"""Two-stage allocation: attention pre-assignment, then pointer-style selection per task.

Pre-assignment works on padded batches ``(B, n, F)`` so the same code serves
single rollouts and replay minibatches. Selection runs one task at a time.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, ParamBlock, Tensor
from .core import Allocation, Entity, Task, completion_check


class Mode(enum.Enum):
    TWO_STAGE = "two_stage"
    SEQUENTIAL_PRE = "seq_pre"
    RANDOM_ORDER_PRE = "rand_pre"
    NO_TAM = "no_tam"
    NO_AMIX = "no_amix"

    @property
    def has_preassign(self) -> bool:
        return self not in (Mode.SEQUENTIAL_PRE, Mode.RANDOM_ORDER_PRE)

    @property
    def fixed_shape(self) -> bool:
        return self in (Mode.NO_TAM, Mode.NO_AMIX)


class NoTasksError(ValueError):
    pass


class FixedShapeError(ValueError):
    """A fixed-width ablation network met a different entity count or too many tasks."""


# ---------------------------------------------------------------------------
# features


@dataclass
class FeatureScale:
    position: float = 1.0
    resource: float = 1.0
    money: float = 1.0

    @classmethod
    def for_spec(cls, spec) -> FeatureScale:
        if spec.name == "retain":
            # one-hot resources, fixed rewards
            return cls(position=1.0, resource=1.0, money=max(spec.final_reward, spec.reward_base, 1.0))
        res = max(spec.res_high, spec.req_high * spec.req_scale, 1.0)
        money = max(spec.reward_base + spec.reward_per_unit * spec.req_high * spec.resource_dim,
                    spec.final_reward if spec.name == "retain" else 0.0, 1.0)
        return cls(position=max(spec.extent, 1.0), resource=res, money=money)


def entity_features(entities: Sequence[Entity], scale: FeatureScale,
                    demands: Sequence[float] | None = None) -> np.ndarray:
    """Rows ``[resources..., x, y, demand]``."""
    if not entities:
        return np.zeros((0, 0))
    res = np.stack([e.resources for e in entities]) / scale.resource
    pos = np.stack([e.position for e in entities]) / scale.position
    dem = np.array([e.demand for e in entities] if demands is None else demands, dtype=np.float64)
    dem = np.minimum(dem, 1e6) / scale.money
    return np.concatenate([res, pos, dem[:, None]], axis=1)


def task_features(tasks: Sequence[Task], scale: FeatureScale, residuals=None) -> np.ndarray:
    """Rows ``[residual..., x, y, reward]``."""
    res = np.stack([t.residual for t in tasks] if residuals is None else residuals) / scale.resource
    pos = np.stack([t.position for t in tasks]) / scale.position
    rew = np.array([t.reward for t in tasks]) / scale.money
    return np.concatenate([res, pos, rew[:, None]], axis=1)


@dataclass
class ObsBatch:
    ent: np.ndarray        # (B, n, Fe)
    ent_mask: np.ndarray   # (B, n)
    task: np.ndarray       # (B, m, Ft)
    task_mask: np.ndarray  # (B, m)

    @property
    def size(self) -> int:
        return self.ent.shape[0]

    @classmethod
    def stack(cls, items: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]], n: int | None = None,
              m: int | None = None) -> ObsBatch:
        """Pad (ent_feats, ent_mask, task_feats) triples to a common shape."""
        n = n or max(max(it[0].shape[0] for it in items), 1)
        m = m or max(max(it[2].shape[0] for it in items), 1)
        fe = max(it[0].shape[1] for it in items)
        ft = max(it[2].shape[1] for it in items)
        B = len(items)
        ent = np.zeros((B, n, fe))
        emask = np.zeros((B, n), dtype=bool)
        task = np.zeros((B, m, ft))
        tmask = np.zeros((B, m), dtype=bool)
        for b, (ef, em, tf) in enumerate(items):
            ent[b, : ef.shape[0]] = ef
            emask[b, : ef.shape[0]] = em
            task[b, : tf.shape[0]] = tf
            tmask[b, : tf.shape[0]] = True
        return cls(ent, emask, task, tmask)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class MixWeights:
    W: np.ndarray  # (n, h), non-negative
    b: np.ndarray  # (n,)


@dataclass
class PreAssignment:
    choices: np.ndarray          # task index per observed entity, -1 when unassigned
    log_probs: np.ndarray
    per_entity_values: np.ndarray


@dataclass
class ParamsConfig:
    entity_dim: int
    task_dim: int
    d: int = 64
    h: int = 64
    hidden: tuple[int, ...] = (64, 64)
    mode: str = Mode.TWO_STAGE.value
    fixed_n: int = 0
    fixed_m: int = 0

    def pad_shape(self) -> tuple[int | None, int | None]:
        """Batch padding: the trained size for fixed-shape modes, natural size otherwise."""
        if Mode(self.mode).fixed_shape:
            return self.fixed_n or None, self.fixed_m or None
        return None, None


class AllocatorParams:
    """Every learnable block of the allocator, grouped by which loss trains it."""

    def __init__(self, cfg: ParamsConfig, rng: np.random.Generator):
        self.cfg = cfg
        fe, ft, d, h, hid = cfg.entity_dim, cfg.task_dim, cfg.d, cfg.h, list(cfg.hidden)
        mode = Mode(cfg.mode)
        # actor head
        self.f_h = MLP("f_h", [fe, *hid, d], rng)
        self.f_g = MLP("f_g", [ft, *hid, d], rng)
        # critic head
        self.f_o = MLP("f_o", [fe, *hid, d], rng)
        self.f_q = MLP("f_q", [ft, *hid, d], rng)
        # self-attention hypernetwork
        self.shn_embed = MLP("shn.embed", [fe, *hid, d], rng)
        self.shn_wq = ParamBlock("shn.wq", ad.init_uniform(rng, d, (d, d)))
        self.shn_wk = ParamBlock("shn.wk", ad.init_uniform(rng, d, (d, d)))
        self.shn_wv = ParamBlock("shn.wv", ad.init_uniform(rng, d, (d, d)))
        self.shn_w_out = ParamBlock("shn.w_out", ad.init_uniform(rng, d, (d, h)))
        self.shn_w_out_b = ParamBlock("shn.w_out_b", ad.init_uniform(rng, d, (h,)))
        self.shn_b_out = ParamBlock("shn.b_out", ad.init_uniform(rng, d, (d, 1)))
        # positive start keeps the ReLU mixer's hidden units alive (rewards are >= 0)
        self.shn_b_out_b = ParamBlock("shn.b_out_b", np.ones(1))
        # second mixing layer h -> 1
        self.amix_w = ParamBlock("amix.w", ad.init_uniform(rng, h, (h, 1)))
        self.amix_b = ParamBlock("amix.b", ad.init_uniform(rng, h, (1,)))
        # select module
        self.f_d = MLP("f_d", [fe, *hid, d], rng)
        self.f_a = MLP("f_a", [fe, *hid, d], rng)
        self.W1 = ParamBlock("select.W1", ad.init_uniform(rng, ft + d, (ft + d, d)))
        self.W2 = ParamBlock("select.W2", ad.init_uniform(rng, d, (d, d)))
        self.v = ParamBlock("select.v", ad.init_uniform(rng, d, (d,)))
        self.f_v = MLP("f_v", [ft + d, *hid, 1], rng)
        # fixed-width ablation heads
        self.fixed_actor: MLP | None = None
        self.fixed_critic: MLP | None = None
        if mode.fixed_shape:
            if cfg.fixed_n < 1 or cfg.fixed_m < 1:
                raise ValueError("fixed-shape modes need fixed_n and fixed_m")
            flat = cfg.fixed_n * (fe + 1) + cfg.fixed_m * (ft + 1)
            width = cfg.fixed_n * cfg.fixed_m
            if mode is Mode.NO_TAM:
                self.fixed_actor = MLP("notam.actor", [flat, *hid, width], rng)
                self.fixed_critic = MLP("notam.critic", [flat, *hid, width], rng)
            else:
                self.fixed_critic = MLP("noamix.critic", [flat + width, *hid, 1], rng)

    @property
    def mode(self) -> Mode:
        return Mode(self.cfg.mode)

    def actor_blocks(self) -> list[ParamBlock]:
        if self.mode is Mode.NO_TAM:
            return self.fixed_actor.blocks
        return self.f_h.blocks + self.f_g.blocks

    def critic_blocks(self) -> list[ParamBlock]:
        """Per-entity value head plus the mixer (or the global critic)."""
        if self.mode is Mode.NO_AMIX:
            return self.fixed_critic.blocks
        head = self.fixed_critic.blocks if self.mode is Mode.NO_TAM else self.f_o.blocks + self.f_q.blocks
        return head + self.shn_blocks() + self.amix_blocks()

    def shn_blocks(self) -> list[ParamBlock]:
        return self.shn_embed.blocks + [self.shn_wq, self.shn_wk, self.shn_wv, self.shn_w_out,
                                        self.shn_w_out_b, self.shn_b_out, self.shn_b_out_b]

    def amix_blocks(self) -> list[ParamBlock]:
        return [self.amix_w, self.amix_b]

    def select_blocks(self) -> list[ParamBlock]:
        return self.f_d.blocks + self.f_a.blocks + [self.W1, self.W2, self.v]

    def value_blocks(self) -> list[ParamBlock]:
        return self.f_v.blocks

    def blocks(self) -> list[ParamBlock]:
        seen, out = set(), []
        groups = (self.f_h.blocks + self.f_g.blocks + self.f_o.blocks + self.f_q.blocks + self.shn_blocks()
                  + self.amix_blocks() + self.select_blocks() + self.value_blocks())
        if self.fixed_actor is not None:
            groups += self.fixed_actor.blocks
        if self.fixed_critic is not None:
            groups += self.fixed_critic.blocks
        for b in groups:
            if id(b) not in seen:
                seen.add(id(b))
                out.append(b)
        return out

    def copy(self) -> AllocatorParams:
        other = AllocatorParams(self.cfg, np.random.default_rng(0))
        for dst, src in zip(other.blocks(), self.blocks()):
            dst.value[...] = src.value
        return other

    def save(self, path: str | Path, scale: FeatureScale | None = None) -> None:
        path = Path(path)
        ad.save_checkpoint(path, self.blocks())
        meta = {"config": asdict(self.cfg), "scale": asdict(scale) if scale else None}
        meta["config"]["hidden"] = list(self.cfg.hidden)
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> tuple[AllocatorParams, FeatureScale | None]:
        path = Path(path)
        meta = json.loads(path.with_suffix(".meta.json").read_text())
        cfg = meta["config"]
        cfg["hidden"] = tuple(cfg["hidden"])
        params = cls(ParamsConfig(**cfg), np.random.default_rng(0))
        ad.load_checkpoint(path, params.blocks())
        scale = FeatureScale(**meta["scale"]) if meta.get("scale") else None
        return params, scale


# ---------------------------------------------------------------------------
# pre-assign networks on batches


def _check_fixed(params: AllocatorParams, batch: ObsBatch) -> None:
    cfg = params.cfg
    n, m = batch.ent.shape[1], batch.task.shape[1]
    if n != cfg.fixed_n or m > cfg.fixed_m:
        raise FixedShapeError(
            f"{cfg.mode} was built for {cfg.fixed_n} entities and at most {cfg.fixed_m} tasks, got n={n}, m={m}")


def _flat_obs(params: AllocatorParams, batch: ObsBatch) -> np.ndarray:
    _check_fixed(params, batch)
    B, M = batch.size, params.cfg.fixed_m
    task = np.zeros((B, M, batch.task.shape[2]))
    tmask = np.zeros((B, M))
    task[:, : batch.task.shape[1]] = batch.task
    tmask[:, : batch.task.shape[1]] = batch.task_mask
    ent = np.concatenate([batch.ent, batch.ent_mask[..., None].astype(float)], axis=2)
    tsk = np.concatenate([task, tmask[..., None]], axis=2)
    return np.concatenate([ent.reshape(B, -1), tsk.reshape(B, -1)], axis=1)


def _task_slots(params: AllocatorParams, batch: ObsBatch) -> int:
    return params.cfg.fixed_m if params.mode.fixed_shape else batch.task.shape[1]


def _slot_mask(params: AllocatorParams, batch: ObsBatch) -> np.ndarray:
    M = _task_slots(params, batch)
    mask = np.zeros((batch.size, M), dtype=bool)
    mask[:, : batch.task.shape[1]] = batch.task_mask
    return mask


def policy_logits(params: AllocatorParams, batch: ObsBatch) -> Tensor:
    """(B, n, m) pre-assign scores."""
    if params.mode is Mode.NO_TAM:
        flat = _flat_obs(params, batch)
        out = params.fixed_actor(flat)
        return ad.reshape(out, (batch.size, params.cfg.fixed_n, params.cfg.fixed_m))
    if params.mode is Mode.NO_AMIX:
        _check_fixed(params, batch)
    h = params.f_h(batch.ent)
    g = params.f_g(batch.task)
    return ad.scaled_dot_scores(h, g)


def policy_log_probs(params: AllocatorParams, batch: ObsBatch) -> Tensor:
    return ad.masked_log_softmax(policy_logits(params, batch), _slot_mask(params, batch)[:, None, :])


def policy_probs(params: AllocatorParams, batch: ObsBatch) -> Tensor:
    return ad.masked_softmax(policy_logits(params, batch), _slot_mask(params, batch)[:, None, :])


def entity_values(params: AllocatorParams, batch: ObsBatch) -> Tensor:
    """(B, n, m) per-entity per-task values Q(w_i, T_j)."""
    if params.mode is Mode.NO_TAM:
        flat = _flat_obs(params, batch)
        out = params.fixed_critic(flat)
        return ad.reshape(out, (batch.size, params.cfg.fixed_n, params.cfg.fixed_m))
    o = params.f_o(batch.ent)
    q = params.f_q(batch.task)
    return ad.scaled_dot_scores(o, q)


def shn_forward(params: AllocatorParams, ent: np.ndarray, ent_mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Self-attention over entities -> per-entity mixing rows W (B, n, h) >= 0 and biases b (B, n)."""
    x = params.shn_embed(ent)
    qs = ad.matmul(x, params.shn_wq)
    ks = ad.matmul(x, params.shn_wk)
    vs = ad.matmul(x, params.shn_wv)
    att = ad.masked_softmax(ad.scaled_dot_scores(qs, ks), ent_mask[:, None, :])
    z = ad.matmul(att, vs) + x
    W = ad.abs_(ad.matmul(z, params.shn_w_out) + params.shn_w_out_b)
    b = ad.matmul(z, params.shn_b_out) + params.shn_b_out_b
    return W, ad.reshape(b, b.shape[:-1])


def amix_forward(params: AllocatorParams, q: Tensor, W: Tensor, b: Tensor, ent_mask: np.ndarray) -> Tensor:
    """Q_tot = |w2| . ReLU(sum_i (q_i + b_i) W_i) + b2, shape (B,)."""
    mask = ent_mask.astype(np.float64)
    qb = ad.mul(ad.add(q, b), mask)
    B, n = mask.shape
    hidden = ad.relu(ad.matmul(ad.reshape(qb, (B, 1, n)), W))
    out = ad.matmul(hidden, ad.abs_(params.amix_w)) + params.amix_b
    return ad.reshape(out, (B,))


def q_total(params: AllocatorParams, batch: ObsBatch, action) -> Tensor:
    """Joint value of a (soft or one-hot) pre-assignment ``action`` (B, n, m)."""
    action = ad.as_tensor(action)
    if params.mode is Mode.NO_AMIX:
        flat = _flat_obs(params, batch)
        B = batch.size
        a = action
        M = params.cfg.fixed_m
        if a.shape[2] < M:
            pad = np.zeros((B, a.shape[1], M - a.shape[2]))
            a = ad.concat([a, pad], axis=2)
        a = ad.mul(a, batch.ent_mask[..., None].astype(float))
        inp = ad.concat([ad.as_tensor(flat), ad.reshape(a, (B, -1))], axis=1)
        return ad.reshape(params.fixed_critic(inp), (B,))
    vals = entity_values(params, batch)
    M = vals.shape[2]
    if action.shape[2] < M:
        action = ad.concat([action, np.zeros((batch.size, action.shape[1], M - action.shape[2]))], axis=2)
    q = ad.sum_(ad.mul(vals, action), axis=2)
    W, b = shn_forward(params, batch.ent, batch.ent_mask)
    return amix_forward(params, q, W, b, batch.ent_mask)


def one_hot_actions(choices: np.ndarray, m: int) -> np.ndarray:
    """(B, n) task indices (-1 = none) -> (B, n, m) one-hot."""
    out = np.zeros(choices.shape + (m,))
    b, i = np.nonzero(choices >= 0)
    out[b, i, choices[b, i]] = 1.0
    return out


# ---------------------------------------------------------------------------
# spec-level single-instance helpers


def _single_batch(entities, tasks, scale: FeatureScale) -> ObsBatch:
    if not tasks:
        raise NoTasksError("pre-assignment needs at least one task")
    ef = entity_features(entities, scale)
    tf = task_features(tasks, scale)
    return ObsBatch(ef[None], np.ones((1, len(entities)), dtype=bool), tf[None],
                    np.ones((1, len(tasks)), dtype=bool))


def _per_entity_rows(fn, entities, tasks, params: AllocatorParams, scale: FeatureScale | None) -> np.ndarray:
    # attention heads: one entity per pass so row i is bit-identical whatever else is present
    # (BLAS picks different accumulation orders for different row counts)
    scale = scale or FeatureScale()
    if params.mode.fixed_shape:
        return fn(params, _single_batch(entities, tasks, scale)).value[0, :, : len(tasks)]
    _single_batch(entities[:1], tasks, scale)
    rows = [fn(params, _single_batch([e], tasks, scale)).value[0, 0, : len(tasks)] for e in entities]
    return np.stack(rows) if rows else np.zeros((0, len(tasks)))


def pre_assign_policy(entities: Sequence[Entity], tasks: Sequence[Task], params: AllocatorParams,
                      scale: FeatureScale | None = None) -> np.ndarray:
    """Row-stochastic (n, m) matrix: entity i's distribution over tasks."""
    return _per_entity_rows(policy_probs, entities, tasks, params, scale)


def pre_assign_values(entities, tasks, params: AllocatorParams, scale: FeatureScale | None = None) -> np.ndarray:
    return _per_entity_rows(entity_values, entities, tasks, params, scale)


def shn_generate(entities: Sequence[Entity], params: AllocatorParams,
                 scale: FeatureScale | None = None) -> MixWeights:
    ef = entity_features(entities, scale or FeatureScale())
    W, b = shn_forward(params, ef[None], np.ones((1, len(entities)), dtype=bool))
    return MixWeights(W.value[0], b.value[0])


def amix_total(per_entity_values: Sequence[float], mix: MixWeights, params: AllocatorParams) -> float:
    q = np.asarray(per_entity_values, dtype=np.float64)
    if q.shape[0] != mix.W.shape[0]:
        raise ad.DimensionError(f"{q.shape[0]} values for {mix.W.shape[0]} mixing rows")
    out = amix_forward(params, q[None], ad.as_tensor(mix.W[None]), ad.as_tensor(mix.b[None]),
                       np.ones((1, q.shape[0]), dtype=bool))
    return float(out.value[0])


# ---------------------------------------------------------------------------
# select module


@dataclass
class SelectTrace:
    task_id: int
    picks: list[int] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    logp_tensors: list[Tensor] = field(default_factory=list)
    value: Tensor | None = None
    completed: bool = False
    profit: float = 0.0

    def to_json(self) -> dict:
        return {"task": self.task_id, "picks": self.picks, "log_probs": self.log_probs,
                "completed": self.completed, "profit": self.profit}


def _sample(probs: np.ndarray, rng: np.random.Generator | None, greedy: bool) -> int:
    if greedy or rng is None:
        return int(np.argmax(probs))
    c = np.cumsum(probs)
    idx = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    return min(idx, len(probs) - 1)


def select_for_task(task: Task, candidates: Sequence[Entity], params: AllocatorParams,
                    scale: FeatureScale | None = None, rng: np.random.Generator | None = None,
                    greedy: bool = False, costs: Sequence[float] | None = None) -> SelectTrace:
    """Pick entities for ``task`` without replacement until its residual is zero.

    ``costs`` are the candidates' demands for this task; infinite cost marks an
    ineligible candidate. Scores are v . tanh(W1 [task_t, ctx_t] + W2 f_d(w)),
    where ctx accumulates f_a of the picks so far.
    """
    scale = scale or FeatureScale()
    trace = SelectTrace(task_id=task.id)
    if costs is None:
        costs = [e.demand for e in candidates]
    order = sorted(range(len(candidates)), key=lambda i: candidates[i].id)
    cands = [candidates[i] for i in order]
    cost_arr = np.array([costs[i] for i in order], dtype=np.float64)
    eligible = np.isfinite(cost_arr)
    residual = task.residual.copy()
    t_feat = task_features([task], scale, residuals=[residual])[0]
    d = params.cfg.d
    if not cands:
        trace.value = params.f_v(np.concatenate([t_feat, np.zeros(d)]))
        return trace
    feats = entity_features(cands, scale, demands=np.where(eligible, cost_arr, 0.0))
    D = params.f_d(feats)
    trace.value = params.f_v(ad.concat([ad.as_tensor(t_feat), ad.mean(D, axis=0)]))
    W2D = ad.matmul(D, params.W2)
    A = params.f_a(feats)
    ctx: Tensor = ad.as_tensor(np.zeros(d))
    avail = eligible.copy()
    while np.any(residual > 0) and np.any(avail):
        t_feat = task_features([task], scale, residuals=[residual])[0]
        e = ad.concat([ad.as_tensor(t_feat), ctx])
        scores = ad.matmul(ad.tanh(ad.matmul(e, params.W1) + W2D), params.v)
        logp = ad.masked_log_softmax(scores, avail)
        probs = np.where(avail, np.exp(logp.value), 0.0)
        k = _sample(probs, rng, greedy)
        lp = ad.index(logp, k)
        trace.picks.append(cands[k].id)
        trace.log_probs.append(float(lp.value))
        if lp.requires_grad:
            trace.logp_tensors.append(lp)
        avail[k] = False
        residual = np.maximum(0.0, residual - cands[k].resources)
        ctx = ctx + ad.index(A, k)
    return trace


# ---------------------------------------------------------------------------
# full allocation


@dataclass
class Observation:
    """Features the pre-assign stage saw; the replay buffer stores these."""

    ent: np.ndarray
    ent_mask: np.ndarray
    task: np.ndarray
    entity_ids: list[int]
    task_ids: list[int]


def observe(tasks: Sequence[Task], entities: Sequence[Entity], params: AllocatorParams,
            scale: FeatureScale) -> Observation:
    if params.mode.fixed_shape:
        shown = sorted(entities, key=lambda e: e.id)
        if len(shown) != params.cfg.fixed_n or len(tasks) > params.cfg.fixed_m:
            raise FixedShapeError(
                f"{params.cfg.mode} was built for {params.cfg.fixed_n} entities and at most "
                f"{params.cfg.fixed_m} tasks, got n={len(shown)}, m={len(tasks)}")
        mask = np.array([e.available for e in shown], dtype=bool)
    else:
        shown = sorted((e for e in entities if e.available), key=lambda e: e.id)
        mask = np.ones(len(shown), dtype=bool)
    ef = entity_features(shown, scale) if shown else np.zeros((0, params.cfg.entity_dim))
    tf = task_features(tasks, scale) if tasks else np.zeros((0, params.cfg.task_dim))
    return Observation(ef, mask, tf, [e.id for e in shown], [t.id for t in tasks])


def sample_preassign(params: AllocatorParams, obs: Observation, rng: np.random.Generator | None,
                     epsilon: float = 0.0, greedy: bool = False) -> PreAssignment:
    n, m = len(obs.entity_ids), len(obs.task_ids)
    if m == 0:
        raise NoTasksError("pre-assignment needs at least one task")
    pn, pm = params.cfg.pad_shape()
    batch = ObsBatch.stack([(obs.ent, obs.ent_mask, obs.task)], n=pn, m=pm)
    logp = policy_log_probs(params, batch).value[0, :n, :m]
    probs = np.exp(logp)
    choices = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        if not obs.ent_mask[i]:
            continue
        if rng is not None and epsilon > 0 and rng.random() < epsilon:
            choices[i] = int(rng.integers(0, m))
        else:
            choices[i] = _sample(probs[i], rng, greedy)
    vals = np.zeros(n)
    if params.mode is not Mode.NO_AMIX:
        ev = entity_values(params, batch).value[0, :n, :m]
        vals = np.where(choices >= 0, ev[np.arange(n), np.maximum(choices, 0)], 0.0)
    lp = np.where(choices >= 0, logp[np.arange(n), np.maximum(choices, 0)], 0.0)
    return PreAssignment(choices, lp, vals)


@dataclass
class AllocationResult:
    allocation: Allocation
    preassign: PreAssignment | None
    observation: Observation | None
    traces: list[SelectTrace]
    order: list[int]


def allocate(tasks: Sequence[Task], entities: Sequence[Entity], params: AllocatorParams,
             mode: Mode | None = None, *, scale: FeatureScale | None = None,
             cost_fn: Callable[[Entity, Task], float] | None = None,
             rng: np.random.Generator | None = None, epsilon: float = 0.0, greedy: bool = False,
             preassign: np.ndarray | None = None) -> AllocationResult:
    """Allocate available ``entities`` to ``tasks``.

    ``cost_fn(entity, task)`` prices an entity for a task (defaults to its
    demand). ``preassign`` forces the stage-one choices (task index per
    available entity sorted by id), which the tests use to probe stage two.
    """
    mode = mode or params.mode
    scale = scale or FeatureScale()
    cost_fn = cost_fn or (lambda e, t: e.demand)
    alloc = Allocation()
    traces: list[SelectTrace] = []
    if not tasks:
        return AllocationResult(alloc, None, None, traces, [])
    by_id = {e.id: e for e in entities}
    pa = obs = None

    def run_select(task: Task, pool: list[Entity]) -> SelectTrace:
        costs = [cost_fn(e, task) for e in pool]
        tr = select_for_task(task, pool, params, scale, rng=rng, greedy=greedy, costs=costs)
        chosen = [by_id[i] for i in tr.picks]
        priced = [_with_demand(e, cost_fn(e, task)) for e in chosen]
        tr.completed = bool(chosen) and completion_check(task, priced)
        tr.profit = (task.reward - sum(e.demand for e in priced)) if tr.completed else 0.0
        if tr.completed:
            alloc.assignments[task.id] = list(tr.picks)
        else:
            alloc.abandoned.add(task.id)
        return tr

    if mode.has_preassign:
        if mode is not params.mode:
            raise ValueError(f"parameters were built for {params.mode.value}, not {mode.value}")
        obs = observe(tasks, entities, params, scale)
        if preassign is not None:
            choices = np.asarray(preassign, dtype=np.int64)
            pa = PreAssignment(choices, np.zeros(len(choices)), np.zeros(len(choices)))
        else:
            pa = sample_preassign(params, obs, rng, epsilon=epsilon, greedy=greedy)
        buckets: dict[int, list[Entity]] = {t.id: [] for t in tasks}
        for eid, c in zip(obs.entity_ids, pa.choices):
            if c >= 0 and by_id[eid].available:
                buckets[obs.task_ids[c]].append(by_id[eid])
        order = list(range(len(tasks)))
        for task in tasks:
            traces.append(run_select(task, buckets[task.id]))
    else:
        order = list(range(len(tasks)))
        if mode is Mode.RANDOM_ORDER_PRE:
            order = list((rng or np.random.default_rng(0)).permutation(len(tasks)))
        remaining = sorted((e for e in entities if e.available), key=lambda e: e.id)
        for ti in order:
            task = tasks[ti]
            tr = run_select(task, remaining)
            traces.append(tr)
            if tr.completed:
                taken = set(tr.picks)
                remaining = [e for e in remaining if e.id not in taken]
    alloc.validate()
    return AllocationResult(alloc, pa, obs, traces, [int(i) for i in order])


def _with_demand(e: Entity, demand: float) -> Entity:
    out = e.copy()
    out.demand = demand if math.isfinite(demand) else 1e18
    return out
