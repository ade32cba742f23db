"""Command-line entry point: ``allocforge <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure,
4 fixed-shape model applied to a differently sized environment.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..allocator import FixedShapeError
from ..bounds import BoundDomainError, verify_bounds
from ..envs import ConfigError, Env, resolve_spec
from ..heuristics import ALGORITHMS as HEURISTICS
from ..heuristics import SizeError, brute_force_optimum
from ..perf import tune_allocator
from .config import ExperimentConfig, load_config
from .run import (GENERALIZATION_MODES, CheckpointMismatchError, evaluate_checkpoint, run_experiment,
                  run_generalization)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_FIXED_SHAPE = 0, 2, 3, 4


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--env", help="builtin env name or spec file (overrides config)")
    p.add_argument("--seed", type=int, help="single seed (overrides config)")
    p.add_argument("--seeds", type=_seeds, help="comma-separated seeds (overrides config)")
    p.add_argument("--out", help="output directory (overrides config)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="allocforge", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a learned allocator for every seed")
    _common(p)
    p.add_argument("--algorithm", help="two_stage, seq_pre, rand_pre, no_tam or no_amix")
    p.add_argument("--iterations", type=int)
    p.add_argument("--init-checkpoint", help="start from these parameters instead of a fresh init")
    p.add_argument("--trace", action="store_true", help="write JSON-lines decision traces for the final evaluation")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint without updates")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--trace", help="JSON-lines trace output path")

    p = sub.add_parser("generalize", help="zero- or few-shot evaluation on a perturbed environment")
    _common(p)
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint file, or a training output directory holding checkpoint_seed<k>.txt")
    p.add_argument("--mode", required=True, choices=GENERALIZATION_MODES)
    p.add_argument("--budget", type=int, help="few-shot fine-tuning episodes")

    p = sub.add_parser("baseline", help="rolling re-plan heuristic runs")
    _common(p)
    p.add_argument("--algorithm", choices=HEURISTICS)
    p.add_argument("--budget", type=int, help="simulated environment steps per episode")
    p.add_argument("--iterations", type=int, help="training length the budget is matched against")

    p = sub.add_parser("verify-bounds", help="closed-form and Monte Carlo selection probabilities")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--N", type=int, default=5)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("oracle", help="exhaustive best allocation for an environment's first decision")
    p.add_argument("--config")
    p.add_argument("--env")
    p.add_argument("--seed", type=int, default=0)
    return ap


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    for key in ("env", "out", "iterations"):
        if getattr(args, key, None) is not None:
            changes[key] = getattr(args, key)
    if getattr(args, "algorithm", None):
        changes["algorithm"] = args.algorithm
    if getattr(args, "seeds", None):
        changes["seeds"] = args.seeds
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = [args.seed]
    if getattr(args, "episodes", None) is not None:
        changes["eval_episodes"] = args.episodes
    return cfg.replace(**changes)


def _emit(obj: dict) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _train(args) -> int:
    cfg = _config(args)
    if not cfg.learned:
        raise ConfigError(f"{cfg.algorithm} is a heuristic; use the baseline subcommand")
    summary = run_experiment(cfg, trace=args.trace, init_checkpoint=args.init_checkpoint)
    _emit({k: summary[k] for k in ("algorithm", "env", "seeds", "last100_mean", "last100_std",
                                   "final_eval_mean", "final_eval_std", "partial")})
    return EXIT_RUNTIME if summary["partial"] else EXIT_OK


def _evaluate(args) -> int:
    cfg = _config(args)
    _emit(evaluate_checkpoint(cfg, args.checkpoint, cfg.seeds[0], args.trace))
    return EXIT_OK


def _generalize(args) -> int:
    cfg = _config(args)
    if args.budget is not None:
        cfg = cfg.replace(few_shot_budget=args.budget)
    ckpt = Path(args.checkpoint)
    source = {s: ckpt / f"checkpoint_seed{s}.txt" for s in cfg.seeds} if ckpt.is_dir() else ckpt
    _emit(run_generalization(cfg, source, args.mode))
    return EXIT_OK


def _baseline(args) -> int:
    cfg = _config(args)
    if args.budget is not None:
        cfg = cfg.replace(heuristic_budget=args.budget)
    if cfg.learned:
        raise ConfigError("baseline needs --algorithm ga, pso or sos")
    summary = run_experiment(cfg)
    _emit({k: summary[k] for k in ("algorithm", "env", "seeds", "final_eval_mean", "final_eval_std", "partial")})
    return EXIT_RUNTIME if summary["partial"] else EXIT_OK


def _verify(args) -> int:
    report = verify_bounds(args.n, args.N, args.trials, args.seed)
    _emit(report)
    return EXIT_OK if report["pass"] else EXIT_RUNTIME


def _oracle(args) -> int:
    ref = args.env or (load_config(args.config).env if args.config else ExperimentConfig().env)
    env = Env(resolve_spec(ref))
    state = env.reset(args.seed)
    alloc, best = brute_force_optimum(state.tasks, state.entities, env.cost)
    _emit({"env": ref, "seed": args.seed, "return": best, "allocation": alloc.to_json()})
    return EXIT_OK


COMMANDS = {"train": _train, "evaluate": _evaluate, "generalize": _generalize, "baseline": _baseline,
            "verify-bounds": _verify, "oracle": _oracle}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    tune_allocator()
    try:
        return COMMANDS[args.command](args)
    except FixedShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIXED_SHAPE
    except (ConfigError, BoundDomainError, SizeError, CheckpointMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
