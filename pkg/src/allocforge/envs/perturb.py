"""Generalization scenarios: new entity populations and shifted task distributions."""

from __future__ import annotations

import numpy as np

from .spec import EnvSpec

ENTITY_MODES = ("zero_shot", "few_shot")


def perturb_entities(spec: EnvSpec, mode: str, seed: int) -> EnvSpec:
    """Fresh entity population. RBF halves the count, MT keeps 80%, EPT keeps all towers.

    ``mode`` only labels the scenario; fine-tuning is the harness's business.
    """
    if mode not in ENTITY_MODES:
        raise ValueError(f"mode must be one of {ENTITY_MODES}")
    rng = np.random.default_rng([seed, 104729])
    new_seed = int(rng.integers(1, 2**31 - 1))
    if spec.name == "rbf":
        return spec.replace(n_entities=max(1, spec.n_entities // 2), entity_seed=new_seed)
    if spec.name == "mt":
        scale = float(rng.uniform(0.8, 1.2))
        return spec.replace(n_entities=max(1, round(spec.n_entities * 0.8)), entity_seed=new_seed,
                            res_low=spec.res_low * scale, res_high=spec.res_high * scale)
    if spec.name == "ept":
        scale = float(rng.uniform(0.7, 1.3))
        return spec.replace(entity_seed=new_seed, res_high=spec.res_high * scale)
    return spec.replace(entity_seed=new_seed)


def perturb_tasks(spec: EnvSpec, seed: int) -> EnvSpec:
    """New task-kind mixture and requirement profiles; the entity population is untouched."""
    rng = np.random.default_rng([seed, 15485863])
    kinds = len(spec.task_kind_probs)
    probs = rng.dirichlet(np.ones(kinds)) if kinds > 1 else np.ones(1)
    probs = (probs / probs.sum()).tolist()
    if spec.name == "retain":
        return spec.replace(task_kind_probs=probs)
    profiles = [rng.uniform(0.5, 1.5, size=spec.resource_dim).round(3).tolist() for _ in range(kinds)]
    if spec.name == "rbf":
        return spec.replace(task_kind_probs=probs, task_kind_profiles=profiles, req_scale=spec.req_scale * 1.5)
    if spec.name == "mt":
        return spec.replace(task_kind_probs=probs, task_kind_profiles=profiles, req_scale=spec.req_scale * 1.25)
    return spec.replace(task_kind_probs=probs, req_scale=spec.req_scale * 1.25,
                        peak_prob=float(rng.uniform(0.05, 0.2)))
