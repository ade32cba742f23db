from .base import Env, EnvState, StepResult, check_allocation, entity_cost, env_reset, env_step, price
from .dynamics import RetainDynamics
from .perturb import perturb_entities, perturb_tasks
from .spec import (ConfigError, EnvSpec, builtin_spec, dumps_spec, load_spec, loads_spec, resolve_spec,
                   save_spec)

__all__ = [
    "ConfigError", "Env", "EnvSpec", "EnvState", "RetainDynamics", "StepResult", "builtin_spec",
    "check_allocation", "dumps_spec", "entity_cost", "env_reset", "env_step", "load_spec", "loads_spec",
    "perturb_entities", "perturb_tasks", "price", "resolve_spec", "save_spec",
]
