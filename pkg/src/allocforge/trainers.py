"""Training: discrete SAC for pre-assignment, REINFORCE for selection, DDPG for bidding workers."""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .allocator import (AllocatorParams, FeatureScale, Mode, ObsBatch, Observation, SelectTrace, allocate,
                        observe, one_hot_actions, policy_log_probs, policy_probs, q_total)
from .autodiff import MLP, ParamBlock, Tape, Tensor
from .core import EntityKind
from .envs import Env, EnvSpec
from .envs.base import EnvState
from .seeding import stream, stream_int

# ---------------------------------------------------------------------------
# replay and schedules


class ReplayBuffer:
    """Fixed-capacity ring; the oldest record is overwritten first."""

    def __init__(self, capacity: int = 1000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.records: list = []
        self.cursor = 0

    def __len__(self) -> int:
        return len(self.records)

    def push(self, record) -> None:
        if len(self.records) < self.capacity:
            self.records.append(record)
        else:
            self.records[self.cursor] = record
        self.cursor = (self.cursor + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list:
        if not self.records:
            raise ValueError("cannot sample from an empty buffer")
        k = min(batch_size, len(self.records))
        return [self.records[i] for i in rng.choice(len(self.records), size=k, replace=False)]


@dataclass
class ExplorationSchedule:
    start: float
    floor: float
    decay: float
    steps: int = 0

    @property
    def current(self) -> float:
        return max(self.floor, self.start * self.decay**self.steps)

    def step(self) -> float:
        self.steps += 1
        return self.current


class RunningMean:
    def __init__(self) -> None:
        self.total = 0.0
        self.count = 0

    @property
    def value(self) -> float:
        return self.total / self.count if self.count else 0.0

    def update(self, x: float) -> None:
        self.total += x
        self.count += 1


# ---------------------------------------------------------------------------
# loss pieces


def sac_actor_loss(log_prob, q_value, alpha: float):
    """alpha * log pi(c|w) - Q. Works on floats or tensors."""
    if isinstance(log_prob, Tensor) or isinstance(q_value, Tensor):
        return ad.sub(ad.mul(log_prob, alpha), q_value)
    return alpha * float(log_prob) - float(q_value)


def td_loss(q_pred, rewards, bootstrap, dones, gamma: float):
    """Mean of 1/2 (r + gamma * (1 - done) * bootstrap - Q)^2 over the batch."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("empty batch")
    y = rewards + gamma * (1.0 - np.asarray(dones, dtype=np.float64)) * np.asarray(bootstrap, dtype=np.float64)
    diff = ad.sub(q_pred, y)
    return ad.mul(ad.mean(ad.square(diff)), 0.5)


def soft_update(online: Sequence[ParamBlock], target: Sequence[ParamBlock], tau: float) -> None:
    if len(online) != len(target):
        raise ad.DimensionError("online and target block lists differ in length")
    for o, t in zip(online, target):
        if o.value.shape != t.value.shape:
            raise ad.DimensionError(f"{o.name}: {o.value.shape} vs {t.value.shape}")
        t.value *= 1.0 - tau
        t.value += tau * o.value


def reinforce_loss(log_probs: Sequence, advantage: float):
    """-(sum of step log-probs) * advantage."""
    if not log_probs:
        return 0.0
    total = log_probs[0]
    for lp in log_probs[1:]:
        total = ad.add(total, lp)
    return ad.mul(total, -float(advantage))


def select_policy_update(traces: Sequence[SelectTrace], baseline: RunningMean | None = None,
                         update_baseline: bool = True) -> tuple[Tensor | float, float]:
    """REINFORCE loss over every task's picks plus the squared-error fit of the value head.

    The advantage is profit minus ``baseline``'s running mean, or minus the
    value head's (detached) prediction for the task when ``baseline`` is None.
    Returns (total loss to differentiate, policy part as a float).
    """
    loss: Tensor | float = 0.0
    policy = 0.0
    for tr in traces:
        if tr.logp_tensors:
            if baseline is not None:
                base = baseline.value
            else:
                base = float(np.sum(tr.value.value)) if tr.value is not None else 0.0
            term = reinforce_loss(tr.logp_tensors, tr.profit - base)
            policy += float(term.value)
            loss = ad.add(loss, term)
        if isinstance(tr.value, Tensor) and tr.value.requires_grad:
            loss = ad.add(loss, ad.mul(ad.sum_(ad.square(ad.sub(tr.value, tr.profit))), 0.5))
    if update_baseline and baseline is not None:
        for tr in traces:
            if tr.picks:
                baseline.update(tr.profit)
    return loss, policy


# ---------------------------------------------------------------------------
# bootstrap for the critic target


def stack_observations(params: AllocatorParams, obs: Sequence[Observation]) -> ObsBatch:
    cfg = params.cfg
    pn, pm = cfg.pad_shape()
    return ObsBatch.stack([(o.ent if o.ent.size else np.zeros((0, cfg.entity_dim)), o.ent_mask, o.task)
                           for o in obs], n=pn, m=pm)


def candidate_actions(probs: np.ndarray, ent_mask: np.ndarray, m: int, rng: np.random.Generator,
                      samples: int = 15, enumerate_limit: int = 32) -> np.ndarray:
    """Joint pre-assignments to maximize over: every one when m^n is small, else greedy + samples.

    Returns (K, n) task indices, -1 for masked entities.
    """
    n = probs.shape[0]
    ids = np.nonzero(ent_mask)[0]
    if m ** len(ids) <= enumerate_limit:
        combos = np.array(list(itertools.product(range(m), repeat=len(ids))), dtype=np.int64)
        out = np.full((len(combos), n), -1, dtype=np.int64)
        if len(ids):
            out[:, ids] = combos
        return out
    p = probs[ids, :m]
    out = np.full((samples + 1, n), -1, dtype=np.int64)
    out[0, ids] = np.argmax(p, axis=1)
    cdf = np.cumsum(p, axis=1)
    u = rng.random((samples, len(ids), 1)) * cdf[None, :, -1:]
    out[1:, ids] = np.minimum((u >= cdf[None]).sum(axis=2), m - 1)
    return out


def bootstrap_values(params: AllocatorParams, target: AllocatorParams, next_obs: Sequence[Observation | None],
                     rng: np.random.Generator, samples: int = 15, enumerate_limit: int = 32) -> np.ndarray:
    """max over candidate joint actions of the target mixer's Q_tot at each next state."""
    out = np.zeros(len(next_obs))
    valid = [i for i, o in enumerate(next_obs) if o is not None and o.task_ids]
    if not valid:
        return out
    nb = stack_observations(params, [next_obs[i] for i in valid])
    probs = policy_probs(params, nb).value
    groups, actions = [], []
    for v, i in enumerate(valid):
        acts = candidate_actions(probs[v], nb.ent_mask[v], len(next_obs[i].task_ids), rng, samples,
                                 enumerate_limit)
        groups.append(np.full(len(acts), v))
        actions.append(acts)
    rep = np.concatenate(groups)
    acts = np.concatenate(actions)
    big = ObsBatch(nb.ent[rep], nb.ent_mask[rep], nb.task[rep], nb.task_mask[rep])
    q = q_total(target, big, one_hot_actions(acts, nb.task.shape[1])).value
    best = np.full(len(valid), -np.inf)
    np.maximum.at(best, rep, q)
    out[valid] = best
    return out


def actor_objective(params: AllocatorParams, batch: ObsBatch, alpha: float) -> Tensor:
    """Expected-form SAC actor loss: mean_b [alpha * sum_i E_pi log pi - Q_tot(pi)]."""
    logp = policy_log_probs(params, batch)
    probs = ad.exp(logp)
    M = logp.shape[2]
    valid = np.zeros((batch.size, M), dtype=bool)
    valid[:, : batch.task.shape[1]] = batch.task_mask
    mask = (batch.ent_mask[:, :, None] & valid[:, None, :]).astype(np.float64)
    probs = ad.mul(probs, mask)
    neg_entropy = ad.sum_(ad.mul(probs, logp), axis=(1, 2))
    q = q_total(params, batch, probs)
    return ad.mean(sac_actor_loss(neg_entropy, q, alpha))


# ---------------------------------------------------------------------------
# bidding workers


def worker_observations(state: EnvState, scale: FeatureScale) -> np.ndarray:
    """Per entity: own resources, position, nearest open task's residual, its distance, open-task count."""
    res = np.stack([e.resources for e in state.entities]) / scale.resource
    pos = np.stack([e.position for e in state.entities])
    k = res.shape[1]
    if state.tasks:
        tpos = np.stack([t.position for t in state.tasks])
        tres = np.stack([t.residual for t in state.tasks]) / scale.resource
        dist = np.linalg.norm(pos[:, None, :] - tpos[None, :, :], axis=2)
        near = np.argmin(dist, axis=1)
        near_req = tres[near]
        near_dist = dist[np.arange(len(pos)), near] / scale.position
    else:
        near_req = np.zeros((len(pos), k))
        near_dist = np.zeros(len(pos))
    count = np.full(len(pos), len(state.tasks) / max(state.spec.max_tasks, 1))
    return np.concatenate([res, pos / scale.position, near_req, near_dist[:, None], count[:, None]], axis=1)


def worker_obs_dim(resource_dim: int) -> int:
    return 2 * resource_dim + 4


class WorkerAgents:
    """One DDPG learner per worker. Weights are stacked (workers, in, out) so all run in one matmul."""

    def __init__(self, n_workers: int, obs_dim: int, rng: np.random.Generator, hidden=(64, 64),
                 lr: float = 1e-4, gamma: float = 0.98, tau: float = 0.005):
        self.n, self.obs_dim = n_workers, obs_dim
        self.lr, self.gamma, self.tau = lr, gamma, tau
        self.actor = MLP("worker.actor", [obs_dim, *hidden, 1], rng, stack=n_workers)
        self.critic = MLP("worker.critic", [obs_dim + 1, *hidden, 1], rng, stack=n_workers)
        self.actor_target = MLP("worker.actor", [obs_dim, *hidden, 1], rng, stack=n_workers)
        self.critic_target = MLP("worker.critic", [obs_dim + 1, *hidden, 1], rng, stack=n_workers)
        for dst, src in zip(self.actor_target.blocks + self.critic_target.blocks,
                            self.actor.blocks + self.critic.blocks):
            dst.value[...] = src.value

    def blocks(self) -> list[ParamBlock]:
        return self.actor.blocks + self.critic.blocks

    @staticmethod
    def _bid(net: MLP, obs) -> Tensor:
        return ad.softplus(net(obs))

    @staticmethod
    def _value(net: MLP, obs, bids) -> Tensor:
        return net(ad.concat([ad.as_tensor(obs), bids], axis=2))

    def act(self, obs: np.ndarray, sigma: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
        """Bids for observations of shape (workers, obs_dim); Gaussian noise then clamp at 0."""
        bids = self._bid(self.actor, obs[:, None, :]).value[:, 0, 0]
        if sigma > 0 and rng is not None:
            bids = bids + sigma * rng.standard_normal(bids.shape)
        return np.maximum(bids, 0.0)


def ddpg_worker_update(agent: WorkerAgents, batch: Sequence[dict]) -> tuple[float, float]:
    """One deterministic policy-gradient step for every worker. Records hold per-worker arrays."""
    obs = np.stack([r["obs"] for r in batch], axis=1)        # (A, B, o)
    bids = np.stack([r["bids"] for r in batch], axis=1)[..., None]
    rew = np.stack([r["rewards"] for r in batch], axis=1)    # (A, B)
    nxt = np.stack([r["next_obs"] for r in batch], axis=1)
    done = np.array([float(r["done"]) for r in batch])[None, :]
    next_q = agent._value(agent.critic_target, nxt, agent._bid(agent.actor_target, nxt)).value[..., 0]
    y = rew + agent.gamma * (1.0 - done) * next_q
    B = len(batch)
    with Tape() as tape:
        q = agent._value(agent.critic, obs, ad.as_tensor(bids))
        diff = ad.sub(ad.reshape(q, (agent.n, B)), y)
        critic_loss = ad.mul(ad.sum_(ad.square(diff)), 0.5 / B)
    ad.backward(tape, critic_loss)
    ad.adam_step(agent.critic.blocks, agent.lr)
    with Tape() as tape:
        q_pi = agent._value(agent.critic, obs, agent._bid(agent.actor, obs))
        actor_loss = ad.mul(ad.sum_(q_pi), -1.0 / B)
    ad.backward(tape, actor_loss)
    ad.adam_step(agent.actor.blocks, agent.lr)
    ad.zero_grad(agent.critic.blocks)
    soft_update(agent.actor.blocks, agent.actor_target.blocks, agent.tau)
    soft_update(agent.critic.blocks, agent.critic_target.blocks, agent.tau)
    return float(actor_loss.value) / agent.n, float(critic_loss.value) / agent.n


# ---------------------------------------------------------------------------
# manager training loop


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 32
    buffer_capacity: int = 1000
    lr: float = 1e-4
    actor_lr: float | None = None  # None: same as lr
    gamma: float = 0.98
    tau: float = 0.005
    alpha: float = 0.05
    eps_start: float = 1.0
    eps_floor: float = 0.05
    eps_decay: float = 0.9999
    sigma_start: float = 0.5
    sigma_floor: float = 0.05
    sigma_decay: float = 0.9999
    bootstrap_samples: int = 15
    enumerate_limit: int = 32
    updates_per_step: int = 1
    select_baseline: str = "value_head"
    grad_clip: float = 10.0
    wall_clock: bool = True


CSV_FIELDS = ("seed", "episode", "manager_return", "worker_return_mean", "actor_loss", "critic_loss",
              "select_loss", "epsilon", "sigma", "wall_ms")


@dataclass
class EpisodeRecord:
    seed: int
    episode: int
    manager_return: float
    worker_return_mean: float
    actor_loss: float
    critic_loss: float
    select_loss: float
    epsilon: float
    sigma: float
    wall_ms: float

    def row(self) -> dict:
        return asdict(self)


def _mean(xs: list[float]) -> float:
    return float(np.mean(xs)) if xs else float("nan")


class ManagerTrainer:
    """Owns one training context: online/target params, replay, schedules and the optional workers."""

    def __init__(self, spec: EnvSpec, params: AllocatorParams, cfg: TrainConfig, seed: int,
                 scale: FeatureScale | None = None, workers: WorkerAgents | None = None):
        self.spec, self.params, self.cfg, self.seed = spec, params, cfg, seed
        self.mode = params.mode
        self.scale = scale or FeatureScale.for_spec(spec)
        self.target = params.copy()
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.worker_buffer = ReplayBuffer(cfg.buffer_capacity)
        self.epsilon = ExplorationSchedule(cfg.eps_start, cfg.eps_floor, cfg.eps_decay)
        self.sigma = ExplorationSchedule(cfg.sigma_start, cfg.sigma_floor, cfg.sigma_decay)
        self.baseline = RunningMean()
        self.workers = workers
        self.explore_rng = stream(seed, "exploration")
        self.replay_rng = stream(seed, "replay")
        self.env = Env(spec)
        self.episodes_done = 0

    # -- updates -----------------------------------------------------------

    def sac_update(self) -> tuple[float, float]:
        p, cfg = self.params, self.cfg
        recs = self.buffer.sample(cfg.batch_size, self.replay_rng)
        batch = stack_observations(p, [r["obs"] for r in recs])
        n, m = batch.ent.shape[1], batch.task.shape[1]
        choices = np.full((len(recs), n), -1, dtype=np.int64)
        for b, r in enumerate(recs):
            choices[b, : len(r["choices"])] = r["choices"]
        boot = bootstrap_values(p, self.target, [r["next_obs"] for r in recs], self.replay_rng,
                                cfg.bootstrap_samples, cfg.enumerate_limit)
        with Tape() as tape:
            q = q_total(p, batch, one_hot_actions(choices, m))
            closs = td_loss(q, [r["reward"] for r in recs], boot, [r["done"] for r in recs], cfg.gamma)
        ad.backward(tape, closs)
        critic = p.critic_blocks()
        ad.clip_grad_norm(critic, cfg.grad_clip)
        ad.adam_step(critic, cfg.lr)
        with Tape() as tape:
            aloss = actor_objective(p, batch, cfg.alpha)
        ad.backward(tape, aloss)
        actor = p.actor_blocks()
        ad.clip_grad_norm(actor, cfg.grad_clip)
        ad.adam_step(actor, cfg.lr if cfg.actor_lr is None else cfg.actor_lr)
        ad.zero_grad(p.blocks())
        soft_update(critic, self.target.critic_blocks(), cfg.tau)
        return float(aloss.value), float(closs.value)

    def select_update(self, tape: Tape, traces: list[SelectTrace]) -> float:
        base = self.baseline if self.cfg.select_baseline == "running_mean" else None
        with tape:
            loss, policy = select_policy_update(traces, base)
        if isinstance(loss, Tensor) and loss.requires_grad:
            ad.backward(tape, loss)
            blocks = self.params.select_blocks() + self.params.value_blocks()
            ad.clip_grad_norm(blocks, self.cfg.grad_clip)
            ad.adam_step(blocks, self.cfg.lr)
            ad.zero_grad(self.params.blocks())
        return policy

    # -- rollout -----------------------------------------------------------

    def _observe(self, state: EnvState) -> Observation | None:
        if not state.tasks:
            return None
        return observe(state.tasks, state.entities, self.params, self.scale)

    def run_episode(self, learn: bool = True) -> EpisodeRecord:
        t0 = time.perf_counter()
        cfg = self.cfg
        episode = self.episodes_done
        state = self.env.reset(stream_int(self.seed, "env", episode))
        ret = 0.0
        worker_ret = np.zeros(len(state.entities))
        a_losses, c_losses, s_losses = [], [], []
        while not self.env.done:
            wobs = None
            if self.workers is not None:
                wobs = worker_observations(state, self.scale)
                bids = self.workers.act(wobs, self.sigma.current, self.explore_rng)
                self.env.set_bids({e.id: float(b) for e, b in zip(state.entities, bids)})
            with Tape() as tape:
                res = allocate(state.tasks, state.entities, self.params, self.mode, scale=self.scale,
                               cost_fn=self.env.cost, rng=self.explore_rng, epsilon=self.epsilon.current)
            step = self.env.step(res.allocation)
            ret += step.reward
            if learn:
                s_losses.append(self.select_update(tape, res.traces))
            if res.preassign is not None and learn:
                self.buffer.push({"obs": res.observation, "choices": res.preassign.choices,
                                  "reward": step.reward, "next_obs": None if step.done else self._observe(state),
                                  "done": step.done})
                if len(self.buffer) >= cfg.batch_size:
                    for _ in range(cfg.updates_per_step):
                        a, c = self.sac_update()
                        a_losses.append(a)
                        c_losses.append(c)
            if self.workers is not None:
                rewards = np.array([step.worker_rewards.get(e.id, 0.0) for e in state.entities])
                worker_ret += rewards
                if learn:
                    self.worker_buffer.push({"obs": wobs, "bids": np.array([e.demand for e in state.entities]),
                                             "rewards": rewards, "next_obs": worker_observations(state, self.scale),
                                             "done": step.done})
                    if len(self.worker_buffer) >= cfg.batch_size:
                        ddpg_worker_update(self.workers, self.worker_buffer.sample(cfg.batch_size, self.replay_rng))
            if learn:
                self.epsilon.step()
                self.sigma.step()
        self.episodes_done += 1
        wall = (time.perf_counter() - t0) * 1000.0 if cfg.wall_clock else 0.0
        return EpisodeRecord(self.seed, episode, ret, float(worker_ret.mean()) if self.workers else 0.0,
                             _mean(a_losses), _mean(c_losses), _mean(s_losses), self.epsilon.current,
                             self.sigma.current, wall)

    def train(self, iterations: int, callback: Callable[[EpisodeRecord], None] | None = None) -> list[EpisodeRecord]:
        curve = []
        for _ in range(iterations):
            rec = self.run_episode()
            curve.append(rec)
            if callback:
                callback(rec)
        return curve


def train_manager(spec: EnvSpec, params: AllocatorParams, cfg: TrainConfig, seed: int = 0,
                  scale: FeatureScale | None = None, workers: WorkerAgents | None = None,
                  callback=None) -> list[EpisodeRecord]:
    return ManagerTrainer(spec, params, cfg, seed, scale, workers).train(cfg.iterations, callback)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(spec: EnvSpec, params: AllocatorParams, episodes: int = 10, seed: int = 0, greedy: bool = False,
             scale: FeatureScale | None = None, workers: WorkerAgents | None = None,
             on_step: Callable | None = None) -> list[float]:
    """Returns of frozen ``params`` with no exploration noise on evaluation-only seeds.

    ``on_step(episode, step, result, step_result)`` sees every decision, e.g. for trace files.
    """
    scale = scale or FeatureScale.for_spec(spec)
    env = Env(spec)
    rng = stream(seed, "eval-policy")
    out = []
    for k in range(episodes):
        state = env.reset(stream_int(seed, "eval-env", k))
        total = 0.0
        while not env.done:
            if workers is not None:
                bids = workers.act(worker_observations(state, scale))
                env.set_bids({e.id: float(b) for e, b in zip(state.entities, bids)})
            res = allocate(state.tasks, state.entities, params, params.mode, scale=scale, cost_fn=env.cost,
                           rng=rng, greedy=greedy)
            t = state.step
            sr = env.step(res.allocation)
            total += sr.reward
            if on_step is not None:
                on_step(k, t, res, sr)
        out.append(total)
    return out


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
