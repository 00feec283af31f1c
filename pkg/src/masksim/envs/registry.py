"""Domain registry and the generic environment operations."""

import numpy as np

from . import armworld, chuteworld, pushworld
from .draw import CELL, COLORS, ring_cells

_MODULES = {m.SPEC.id: m for m in (pushworld, armworld, chuteworld)}
DOMAINS = {i: m.SPEC for i, m in _MODULES.items()}


def env_module(domain_id):
    if domain_id not in _MODULES:
        raise KeyError(f"unknown domain id {domain_id}")
    return _MODULES[domain_id]


def make_env(domain_id, seed):
    return env_module(domain_id).init_state(np.random.default_rng(seed))


def step_oracle(state, action):
    return env_module(state.domain_id).step(state, action)


def render(state):
    return env_module(state.domain_id).render(state)


def success(state):
    return env_module(state.domain_id).success(state)


def rollout_oracle(state, actions):
    """Fold step_oracle over an action sequence; returns T+1 frames."""
    frames = [render(state)]
    for a in np.asarray(actions):
        state = step_oracle(state, a)
        frames.append(render(state))
    return np.stack(frames)


def success_from_frame(frame):
    """Pixel judge: at least half the goal ring's interior is block-colored.

    Total over arbitrary frames (including generated ones): returns False
    when no goal ring is found.
    """
    rings = ring_cells(frame)
    if not rings:
        return False
    block = np.array(COLORS["block"], dtype=np.uint8)
    x, y = rings[0]
    interior = frame[y * CELL + 1:y * CELL + 3, x * CELL + 1:x * CELL + 3]
    return int((interior == block).all(-1).sum()) >= 2
