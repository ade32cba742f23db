"""Zero- and few-shot evaluation of trained checkpoints on perturbed populations and task mixes.

usage: python3 scripts/generalization.py TRAINED_DIR [CONFIG]
"""

import sys
from pathlib import Path

from allocforge.allocator import FeatureScale
from allocforge.harness import load_config, run_generalization
from allocforge.harness.run import GENERALIZATION_MODES, build_params, experiment_spec
from allocforge.perf import tune_allocator


def main(trained: Path, config: str) -> None:
    tune_allocator()
    cfg = load_config(config)
    spec = experiment_spec(cfg)
    ckpts = {s: trained / f"checkpoint_seed{s}.txt" for s in cfg.seeds}
    blank = {}
    for s in cfg.seeds:
        blank[s] = trained / "untrained" / f"checkpoint_seed{s}.txt"
        blank[s].parent.mkdir(parents=True, exist_ok=True)
        build_params(cfg, spec, s).save(blank[s], FeatureScale.for_spec(spec))
    for mode in GENERALIZATION_MODES:
        got = run_generalization(cfg, ckpts, mode, trained / "generalization")
        line = f"{mode:18s} trained {got['mean']:.3f} +- {got['std']:.3f}"
        if mode.startswith("zero"):
            ref = run_generalization(cfg, blank, mode, trained / "untrained")
            line += f"   untrained {ref['mean']:.3f}"
        print(line)


if __name__ == "__main__":
    main(Path(sys.argv[1]), sys.argv[2] if len(sys.argv) > 2 else "configs/rbf-small.cfg")
