"""Scripted policies of adjustable quality."""

import numpy as np

from . import registry


def scripted_policy(state, skill, rng):
    """Greedy action with probability `skill`, else uniform within bounds."""
    env = registry.env_module(state.domain_id)
    if rng.random() < skill:
        return env.greedy(state, rng)
    lo = np.array([b[0] for b in env.SPEC.action_bounds])
    hi = np.array([b[1] for b in env.SPEC.action_bounds])
    return rng.uniform(lo, hi)
