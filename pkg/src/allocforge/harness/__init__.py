"""Experiment driver: config files, seeded runs, metrics export and the CLI."""

from .config import ALGORITHMS, CONFIG_HEADER, ExperimentConfig, dumps_config, load_config, loads_config, save_config
from .run import (GENERALIZATION_MODES, METRICS_FIELDS, CheckpointMismatchError, evaluate_checkpoint,
                  perturbed_spec, read_metrics, run_experiment, run_generalization, run_seed, window_mean)

__all__ = [
    "ALGORITHMS", "CONFIG_HEADER", "CheckpointMismatchError", "ExperimentConfig", "GENERALIZATION_MODES",
    "METRICS_FIELDS", "dumps_config", "evaluate_checkpoint", "load_config", "loads_config", "perturbed_spec",
    "read_metrics", "run_experiment", "run_generalization", "run_seed", "save_config", "window_mean",
]
