"""Seeded experiment pipelines: train, evaluate, generalize, heuristic baselines."""

from __future__ import annotations

import csv
import json
import math
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..allocator import AllocatorParams, FeatureScale, FixedShapeError, Mode, ParamsConfig
from ..envs import ConfigError, EnvSpec, perturb_entities, perturb_tasks, resolve_spec
from ..heuristics import heuristic_episode
from ..seeding import stream, stream_int
from ..trainers import CSV_FIELDS, ManagerTrainer, WorkerAgents, evaluate, worker_obs_dim
from .config import ExperimentConfig

METRICS_FIELDS = ("algo",) + CSV_FIELDS
SUMMARY_WINDOW = 100
GENERALIZATION_MODES = ("zero_shot_entity", "few_shot_entity", "zero_shot_task", "few_shot_task")


class CheckpointMismatchError(ValueError):
    """Checkpoint was produced by a different algorithm or feature layout."""


# ---------------------------------------------------------------------------
# metrics files


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "nan"
    return str(v)


class MetricsWriter:
    """Appends one row per episode and flushes, so a crash leaves a readable prefix."""

    def __init__(self, path: Path, algo: str):
        self.path, self.algo = path, algo
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(METRICS_FIELDS)

    def write(self, row: dict) -> None:
        self._w.writerow([self.algo] + [_fmt(row[k]) for k in CSV_FIELDS])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in CSV_FIELDS:
            r[k] = int(r[k]) if k in ("seed", "episode") else float(r[k])
    return rows


def window_mean(returns, window: int = SUMMARY_WINDOW) -> float:
    tail = list(returns)[-window:]
    return float(np.mean(tail)) if tail else float("nan")


def _mean_std(xs) -> tuple[float, float]:
    xs = [x for x in xs if math.isfinite(x)]
    if not xs:
        return float("nan"), float("nan")
    # sample std across seeds/episodes; a single value has spread 0
    return float(np.mean(xs)), float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0


# ---------------------------------------------------------------------------
# building blocks


def feature_dims(spec: EnvSpec) -> tuple[int, int]:
    dim = spec.resource_dim + 3
    return dim, dim


def experiment_spec(cfg: ExperimentConfig) -> EnvSpec:
    spec = resolve_spec(cfg.env)
    if cfg.worker_mode and not spec.worker_mode:
        if spec.name != "rbf":
            raise ConfigError("worker_mode is only defined for the rbf environment")
        spec = spec.replace(worker_mode=True)
    return spec


def build_params(cfg: ExperimentConfig, spec: EnvSpec, seed: int) -> AllocatorParams:
    ent, task = feature_dims(spec)
    pc = ParamsConfig(ent, task, d=cfg.d, h=cfg.h, hidden=tuple(cfg.hidden), mode=cfg.algorithm,
                      fixed_n=spec.n_entities, fixed_m=spec.max_tasks)
    return AllocatorParams(pc, stream(seed, "actor-init"))


def build_workers(cfg: ExperimentConfig, spec: EnvSpec, seed: int) -> WorkerAgents | None:
    if not spec.worker_mode:
        return None
    return WorkerAgents(spec.n_entities, worker_obs_dim(spec.resource_dim), stream(seed, "worker-init"),
                        hidden=tuple(cfg.hidden), lr=cfg.lr, gamma=cfg.gamma, tau=cfg.tau)


def load_params(path: str | Path, algorithm: str | None = None) -> tuple[AllocatorParams, FeatureScale | None]:
    try:
        params, scale = AllocatorParams.load(path)
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointMismatchError(f"cannot load checkpoint {path}: {exc}") from exc
    if algorithm is not None and params.mode is not Mode(algorithm):
        raise CheckpointMismatchError(f"checkpoint holds {params.mode.value}, config asks for {algorithm}")
    return params, scale


def check_compatible(params: AllocatorParams, spec: EnvSpec) -> None:
    """Feature layout must match; fixed-shape modes also need the same population size."""
    ent, task = feature_dims(spec)
    if (params.cfg.entity_dim, params.cfg.task_dim) != (ent, task):
        raise CheckpointMismatchError(
            f"checkpoint expects features ({params.cfg.entity_dim}, {params.cfg.task_dim}), env gives ({ent}, {task})")
    if params.mode in (Mode.NO_TAM, Mode.NO_AMIX):
        if spec.n_entities != params.cfg.fixed_n or spec.max_tasks > params.cfg.fixed_m:
            raise FixedShapeError(
                f"{params.mode.value} was built for {params.cfg.fixed_n} entities and at most "
                f"{params.cfg.fixed_m} tasks; the environment has {spec.n_entities} and {spec.max_tasks}")


# ---------------------------------------------------------------------------
# single-seed runs


@dataclass
class SeedResult:
    seed: int
    csv: str
    returns: list[float] = field(default_factory=list)
    final_eval: list[float] = field(default_factory=list)
    checkpoint: str | None = None
    error: str | None = None

    def summary(self) -> dict:
        # file names only, so summaries do not depend on where the run was written
        return {"seed": self.seed, "csv": Path(self.csv).name, "episodes": len(self.returns),
                "last100_mean": window_mean(self.returns), "final_eval_mean": _mean_std(self.final_eval)[0],
                "final_eval": self.final_eval, "checkpoint": self.checkpoint and Path(self.checkpoint).name,
                "error": self.error}


class TraceWriter:
    def __init__(self, path: Path, seed: int):
        self._fh = open(path, "w")
        self.seed = seed

    def __call__(self, episode, step, result, step_result) -> None:
        rec = {"seed": self.seed, "episode": episode, "step": step, "reward": step_result.reward,
               "allocation": result.allocation.to_json(), "completed": list(step_result.completed),
               "order": list(result.order), "select": [t.to_json() for t in result.traces]}
        if result.preassign is not None:
            rec["preassign"] = {str(e): int(c) for e, c in
                                zip(result.observation.entity_ids, result.preassign.choices)}
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()


def _learned_seed(cfg: ExperimentConfig, spec: EnvSpec, seed: int, out: Path, trace: bool,
                  params: AllocatorParams | None, scale: FeatureScale | None) -> SeedResult:
    res = SeedResult(seed, str(out / f"metrics_seed{seed}.csv"))
    if params is None:
        params = build_params(cfg, spec, seed)
    check_compatible(params, spec)
    scale = scale or FeatureScale.for_spec(spec)
    workers = build_workers(cfg, spec, seed)
    writer = MetricsWriter(Path(res.csv), cfg.algorithm)
    try:
        trainer = ManagerTrainer(spec, params, cfg.train_config(), seed, scale, workers)

        def log(rec):
            writer.write(rec.row())
            res.returns.append(rec.manager_return)

        trainer.train(cfg.iterations, log)
    finally:
        writer.close()
    ckpt = out / f"checkpoint_seed{seed}.txt"
    params.save(ckpt, scale)
    if workers is not None:
        ad.save_checkpoint(out / f"workers_seed{seed}.txt", workers.blocks())
    res.checkpoint = str(ckpt)
    tracer = TraceWriter(out / f"trace_seed{seed}.jsonl", seed) if trace else None
    try:
        res.final_eval = evaluate(spec, params, cfg.eval_episodes, seed, greedy=cfg.greedy_eval, scale=scale,
                                  workers=workers, on_step=tracer)
    finally:
        if tracer:
            tracer.close()
    return res


def heuristic_budget(cfg: ExperimentConfig, spec: EnvSpec) -> int:
    """Simulated steps per episode; by default what a learner consumes over its whole training run."""
    return cfg.heuristic_budget or cfg.iterations * spec.episode_length


def _heuristic_seed(cfg: ExperimentConfig, spec: EnvSpec, seed: int, out: Path) -> SeedResult:
    # heuristics do not learn across episodes, so each row is one evaluation episode
    res = SeedResult(seed, str(out / f"metrics_seed{seed}.csv"))
    budget = heuristic_budget(cfg, spec)
    writer = MetricsWriter(Path(res.csv), cfg.algorithm)
    try:
        for k in range(cfg.eval_episodes):
            t0 = time.perf_counter()
            rep = heuristic_episode(spec, cfg.algorithm, budget, stream_int(seed, "planner", k),
                                    stream_int(seed, "eval-env", k), horizon=cfg.horizon,
                                    interval=cfg.replan_interval, population=cfg.population)
            wall = (time.perf_counter() - t0) * 1000.0 if cfg.wall_clock else 0.0
            writer.write({"seed": seed, "episode": k, "manager_return": rep.episode_return,
                          "worker_return_mean": 0.0, "actor_loss": float("nan"), "critic_loss": float("nan"),
                          "select_loss": float("nan"), "epsilon": 0.0, "sigma": 0.0, "wall_ms": wall})
            res.returns.append(rep.episode_return)
    finally:
        writer.close()
    res.final_eval = list(res.returns)
    return res


def run_seed(cfg: ExperimentConfig, seed: int, out: Path, spec: EnvSpec | None = None, trace: bool = False,
             params: AllocatorParams | None = None, scale: FeatureScale | None = None) -> SeedResult:
    spec = spec or experiment_spec(cfg)
    if cfg.learned:
        return _learned_seed(cfg, spec, seed, out, trace, params, scale)
    return _heuristic_seed(cfg, spec, seed, out)


# ---------------------------------------------------------------------------
# experiments


def _aggregate(cfg: ExperimentConfig, results: list[SeedResult], extra: dict | None = None) -> dict:
    done = [r for r in results if r.error is None]
    last_mean, last_std = _mean_std([window_mean(r.returns) for r in done])
    eval_mean, eval_std = _mean_std([float(np.mean(r.final_eval)) for r in done if r.final_eval])
    summary = {"algorithm": cfg.algorithm, "env": cfg.env, "seeds": [r.seed for r in results],
               "iterations": cfg.iterations, "window": SUMMARY_WINDOW,
               "last100_mean": last_mean, "last100_std": last_std,
               "final_eval_mean": eval_mean, "final_eval_std": eval_std,
               "partial": len(done) < len(results), "per_seed": [r.summary() for r in results]}
    if extra:
        summary.update(extra)
    return summary


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None, trace: bool = False,
                   init_checkpoint: str | Path | None = None) -> dict:
    """Train (or replan-loop) every seed, then write ``summary.json``.

    Config and shape errors are raised before any seed starts; other failures
    are recorded per seed and mark the summary as partial.
    """
    cfg.validate()
    spec = experiment_spec(cfg)
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    init = None
    if init_checkpoint is not None:
        if not cfg.learned:
            raise ConfigError("heuristics cannot start from a checkpoint")
        init = load_params(init_checkpoint, cfg.algorithm)
        check_compatible(init[0], spec)
    results = []
    for seed in cfg.seeds:
        params, scale = (init[0].copy(), init[1]) if init else (None, None)
        try:
            results.append(run_seed(cfg, seed, out, spec, trace, params, scale))
        except (ConfigError, FixedShapeError, CheckpointMismatchError):
            raise
        except Exception as exc:  # noqa: BLE001 - recorded, run continues with the next seed
            r = SeedResult(seed, str(out / f"metrics_seed{seed}.csv"), error=f"{type(exc).__name__}: {exc}")
            if Path(r.csv).exists():
                r.returns = [row["manager_return"] for row in read_metrics(r.csv)]
            r.error += "\n" + traceback.format_exc(limit=3)
            results.append(r)
    summary = _aggregate(cfg, results)
    _write_json(out / "summary.json", summary)
    return summary


def perturbed_spec(spec: EnvSpec, mode: str, seed: int) -> EnvSpec:
    if mode not in GENERALIZATION_MODES:
        raise ConfigError(f"generalization mode must be one of {GENERALIZATION_MODES}")
    if mode.endswith("entity"):
        return perturb_entities(spec, mode.rsplit("_", 1)[0], seed)
    return perturb_tasks(spec, seed)


def run_generalization(cfg: ExperimentConfig, checkpoint: str | Path | dict[int, str | Path], mode: str,
                       out: str | Path | None = None) -> dict:
    """Evaluate a trained checkpoint on a perturbed environment, optionally after brief fine-tuning.

    ``checkpoint`` is one path shared by all seeds or a per-seed mapping.
    Zero-shot never updates parameters; few-shot trains for ``few_shot_budget``
    episodes with exploration starting at ``few_shot_epsilon``.
    """
    cfg.validate()
    if not cfg.learned:
        raise ConfigError("generalization needs a learned algorithm")
    base = resolve_spec(cfg.env)
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    few = mode.startswith("few_shot")
    tcfg = cfg.train_config()
    tcfg.eps_start = cfg.few_shot_epsilon
    tcfg.eps_floor = min(cfg.eps_floor, cfg.few_shot_epsilon)
    per_seed, evals = [], []
    for seed in cfg.seeds:
        path = checkpoint[seed] if isinstance(checkpoint, dict) else checkpoint
        params, scale = load_params(path, cfg.algorithm)
        spec = perturbed_spec(base, mode, seed)
        check_compatible(params, spec)
        scale = scale or FeatureScale.for_spec(base)
        if few and cfg.few_shot_budget > 0:
            ManagerTrainer(spec, params, tcfg, stream_int(seed, "few-shot"), scale).train(cfg.few_shot_budget)
        ret = evaluate(spec, params, cfg.eval_episodes, seed, greedy=cfg.greedy_eval, scale=scale)
        evals.append(float(np.mean(ret)))
        per_seed.append({"seed": seed, "checkpoint": str(path), "eval": ret, "eval_mean": evals[-1]})
    mean, std = _mean_std(evals)
    summary = {"algorithm": cfg.algorithm, "env": cfg.env, "mode": mode, "few_shot_budget": cfg.few_shot_budget if few else 0,
               "mean": mean, "std": std, "per_seed": per_seed}
    _write_json(out / f"generalization_{mode}.json", summary)
    return summary


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint: str | Path, seed: int, trace_path: str | Path | None = None) -> dict:
    params, scale = load_params(checkpoint, cfg.algorithm if cfg.learned else None)
    spec = resolve_spec(cfg.env)
    check_compatible(params, spec)
    tracer = TraceWriter(Path(trace_path), seed) if trace_path else None
    try:
        ret = evaluate(spec, params, cfg.eval_episodes, seed, greedy=cfg.greedy_eval,
                       scale=scale or FeatureScale.for_spec(spec), on_step=tracer)
    finally:
        if tracer:
            tracer.close()
    mean, std = _mean_std(ret)
    return {"algorithm": params.mode.value, "env": cfg.env, "seed": seed, "episodes": len(ret),
            "returns": ret, "mean": mean, "std": std}
