"""Shared environment types: domain descriptors, exact states, episodes."""

from dataclasses import dataclass

import numpy as np

from .draw import TARGET_HZ


@dataclass(frozen=True)
class DomainSpec:
    id: int
    name: str
    action_dim: int
    native_hz: int
    action_bounds: tuple  # ((lo, hi), ...) per action dimension

    def __post_init__(self):
        if self.native_hz % TARGET_HZ != 0:
            raise ValueError(f"native_hz {self.native_hz} not a multiple of {TARGET_HZ}")
        if len(self.action_bounds) != self.action_dim:
            raise ValueError("action_bounds length must match action_dim")

    @property
    def stride(self):
        return self.native_hz // TARGET_HZ

    @property
    def chunk_dim(self):
        return self.stride * self.action_dim

    def clamp(self, action):
        a = np.asarray(action, dtype=np.float64).reshape(self.action_dim)
        lo = np.array([b[0] for b in self.action_bounds])
        hi = np.array([b[1] for b in self.action_bounds])
        return np.clip(a, lo, hi)

    def to_json(self):
        return {
            "id": self.id,
            "name": self.name,
            "action_dim": self.action_dim,
            "native_hz": self.native_hz,
            "stride": self.stride,
            "action_bounds": [list(b) for b in self.action_bounds],
            "chunk_dim": self.chunk_dim,
        }


@dataclass(frozen=True)
class EnvState:
    """Exact world state: a flat tuple of integers whose layout is domain-specific.

    PushWorld-2: (agent_x, agent_y, block_x, block_y, goal_x, goal_y)
    ArmWorld-3:  (tick1, tick2, tick3, target_x, target_y)
    ChuteWorld-1: (block_col, goal_col)
    """
    domain_id: int
    pose: tuple
    step_index: int = 0

    def advanced(self, pose):
        return EnvState(self.domain_id, tuple(int(v) for v in pose), self.step_index + 1)


@dataclass
class Episode:
    domain_id: int
    frames: np.ndarray    # (T+1, 64, 64, 3) uint8, native rate
    actions: np.ndarray   # (T, D) float32, native rate
    success: bool
    seed: int = 0
    skill: float = 0.0
