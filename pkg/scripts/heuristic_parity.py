"""Compare a trained run with GA, PSO and SOS rolling re-plans on the same evaluation episodes.

usage: python3 scripts/heuristic_parity.py TRAINED_DIR [CONFIG]

TRAINED_DIR is the output of learning_curve.py (or `allocforge train`) for CONFIG.
"""

import dataclasses
import json
import sys
from pathlib import Path

from allocforge.harness import load_config, run_experiment
from allocforge.harness.run import heuristic_budget, experiment_spec
from allocforge.perf import tune_allocator


def main(trained: Path, config: str) -> None:
    tune_allocator()
    cfg = load_config(config)
    learned = json.loads((trained / "summary.json").read_text())["final_eval_mean"]
    print(f"budget {heuristic_budget(cfg, experiment_spec(cfg))} simulated steps per episode")
    print(f"{cfg.algorithm:10s} {learned:.3f}")
    for algo in ("ga", "pso", "sos"):
        s = run_experiment(dataclasses.replace(cfg, algorithm=algo), trained / algo)
        print(f"{algo:10s} {s['final_eval_mean']:.3f} +- {s['final_eval_std']:.3f}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), sys.argv[2] if len(sys.argv) > 2 else "configs/rbf-small.cfg")
