"""Train two_stage, rand_pre and seq_pre on Retain-the-Almighty and compare them with the oracle.

usage: python3 scripts/retain_ordering.py [OUT_DIR]
"""

import dataclasses
import sys
from pathlib import Path

import numpy as np

from allocforge.envs import Env
from allocforge.harness import load_config, run_experiment
from allocforge.harness.run import experiment_spec, load_params
from allocforge.heuristics import brute_force_optimum
from allocforge.perf import tune_allocator
from allocforge.trainers import evaluate

ROOT = Path(__file__).resolve().parent.parent


def main(out: Path) -> None:
    tune_allocator()
    base = load_config(ROOT / "configs" / "retain.cfg")
    spec = experiment_spec(base)
    env = Env(spec)
    state = env.reset(0)
    _, oracle = brute_force_optimum(state.tasks, state.entities, cost_fn=env.cost)
    print(f"oracle return {oracle}")
    for algo in ("two_stage", "rand_pre", "seq_pre"):
        cfg = dataclasses.replace(base, algorithm=algo)
        summary = run_experiment(cfg, out / algo)
        finals = [s["final_eval_mean"] for s in summary["per_seed"]]
        greedy = []
        for seed in cfg.seeds:
            params, scale = load_params(out / algo / f"checkpoint_seed{seed}.txt")
            greedy.append(evaluate(spec, params, 1, seed, greedy=True, scale=scale)[0])
        hits = sum(abs(g - oracle) < 1e-9 for g in greedy)
        print(f"{algo:10s} final {np.mean(finals):.3f} +- {np.std(finals, ddof=1):.3f}  "
              f"greedy {np.round(greedy, 3).tolist()}  oracle hits {hits}/{len(greedy)}")


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "runs/retain"))
