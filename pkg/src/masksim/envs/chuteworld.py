"""ChuteWorld-1: a block slides along a floor chute toward a goal column.

One action dimension at 2 Hz (stride 1): sign-rounded to a one-cell move
left or right along the row above the grey floor.
"""

import numpy as np

from .core import DomainSpec, EnvState
from .draw import COLORS, GRID, blank_frame, draw_cell_ring, fill_cell

SPEC = DomainSpec(
    id=2,
    name="ChuteWorld-1",
    action_dim=1,
    native_hz=2,
    action_bounds=((-1.0, 1.0),),
)

ROW = GRID - 2  # blocks slide on the row above the floor


def init_state(rng):
    col = int(rng.integers(0, GRID))
    goal = int(rng.integers(0, GRID - 1))
    if goal >= col:
        goal += 1
    return EnvState(domain_id=SPEC.id, pose=(col, goal))


def step(state, action):
    col, goal = state.pose
    d = int(np.rint(SPEC.clamp(action))[0])
    col = min(max(col + d, 0), GRID - 1)
    return state.advanced((col, goal))


def render(state):
    col, goal = state.pose
    f = blank_frame()
    for x in range(GRID):
        fill_cell(f, x, GRID - 1, COLORS["wall"])
    fill_cell(f, col, ROW, COLORS["block"])
    draw_cell_ring(f, goal, ROW, COLORS["goal"])
    return f


def success(state):
    col, goal = state.pose
    return col == goal


def greedy(state, rng):
    col, goal = state.pose
    return np.array([float(np.sign(goal - col))])
