"""Train from a config and print per-seed first/last 100-episode means plus a coarse curve.

usage: python3 scripts/learning_curve.py configs/rbf-small.cfg [OUT_DIR]
"""

import sys
from pathlib import Path

import numpy as np

from allocforge.harness import load_config, read_metrics, run_experiment
from allocforge.perf import tune_allocator


def main(config: str, out: Path) -> None:
    tune_allocator()
    cfg = load_config(config)
    summary = run_experiment(cfg, out)
    curves = []
    for seed in cfg.seeds:
        r = np.array([row["manager_return"] for row in read_metrics(out / f"metrics_seed{seed}.csv")])
        curves.append(r)
        print(f"seed {seed}: first100 {r[:100].mean():.3f}  last100 {r[-100:].mean():.3f}")
    mean = np.mean(curves, axis=0)
    for start in range(0, len(mean), 50):
        print(f"episodes {start:4d}-{start + 49:4d}  {mean[start:start + 50].mean():8.3f}")
    print(f"final evaluation {summary['final_eval_mean']:.3f} +- {summary['final_eval_std']:.3f}")


if __name__ == "__main__":
    cfg_path = sys.argv[1] if len(sys.argv) > 1 else "configs/rbf-small.cfg"
    main(cfg_path, Path(sys.argv[2] if len(sys.argv) > 2 else f"runs/{Path(cfg_path).stem}"))
