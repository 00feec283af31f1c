"""Deterministic synthetic environments: oracle dynamics, rendering, datasets."""

from .core import DomainSpec, EnvState, Episode
from .dataset import generate_dataset, load_dataset, run_episode
from .policy import scripted_policy
from .registry import (DOMAINS, make_env, render, rollout_oracle,
                       step_oracle, success, success_from_frame)

__all__ = [
    "DOMAINS", "DomainSpec", "EnvState", "Episode",
    "generate_dataset", "load_dataset", "make_env", "render",
    "rollout_oracle", "run_episode", "scripted_policy", "step_oracle",
    "success", "success_from_frame",
]
