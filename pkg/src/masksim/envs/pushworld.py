"""PushWorld-2: an agent pushes a block onto a goal cell on a walled 16x16 grid.

Grid border cells are impenetrable grey walls; the playfield is the inner
14x14. Actions are 2D in [-1, 1], rounded per component to {-1, 0, 1} cell
moves at 4 Hz. Pushing moves the block one cell if its target cell is free.
"""

import numpy as np

from .core import DomainSpec, EnvState
from .draw import COLORS, GRID, blank_frame, draw_cell_ring, fill_cell

SPEC = DomainSpec(
    id=0,
    name="PushWorld-2",
    action_dim=2,
    native_hz=4,
    action_bounds=((-1.0, 1.0), (-1.0, 1.0)),
)


def is_wall(x, y):
    return x in (0, GRID - 1) or y in (0, GRID - 1)


def _sample_free(rng, lo, hi, taken):
    while True:
        x = int(rng.integers(lo, hi + 1))
        y = int(rng.integers(lo, hi + 1))
        if (x, y) not in taken:
            return x, y


def init_state(rng):
    # block and goal stay off the wall-adjacent rim so the greedy pusher
    # always has a free cell to push from
    agent = _sample_free(rng, 1, GRID - 2, set())
    block = _sample_free(rng, 2, GRID - 3, {agent})
    goal = _sample_free(rng, 2, GRID - 3, {agent, block})
    return EnvState(domain_id=SPEC.id, pose=(*agent, *block, *goal))


def step(state, action):
    ax, ay, bx, by, gx, gy = state.pose
    dx, dy = np.rint(SPEC.clamp(action)).astype(int)
    tx, ty = ax + dx, ay + dy
    if (tx, ty) == (ax, ay) or is_wall(tx, ty):
        return state.advanced(state.pose)
    if (tx, ty) == (bx, by):
        px, py = bx + dx, by + dy
        if is_wall(px, py):
            return state.advanced(state.pose)
        return state.advanced((tx, ty, px, py, gx, gy))
    return state.advanced((tx, ty, bx, by, gx, gy))


def render(state):
    ax, ay, bx, by, gx, gy = state.pose
    f = blank_frame()
    for i in range(GRID):
        for j in (0, GRID - 1):
            fill_cell(f, i, j, COLORS["wall"])
            fill_cell(f, j, i, COLORS["wall"])
    fill_cell(f, bx, by, COLORS["block"])
    fill_cell(f, ax, ay, COLORS["agent"])
    draw_cell_ring(f, gx, gy, COLORS["goal"])
    return f


def success(state):
    _, _, bx, by, gx, gy = state.pose
    return (bx, by) == (gx, gy)


def greedy(state, rng):
    """Push the block toward the goal: line up behind it, then shove."""
    ax, ay, bx, by, gx, gy = state.pose
    if (bx, by) == (gx, gy):
        return np.zeros(2)
    ddx, ddy = gx - bx, gy - by
    if abs(ddx) >= abs(ddy):
        push = (int(np.sign(ddx)), 0)
    else:
        push = (0, int(np.sign(ddy)))
    stand = (bx - push[0], by - push[1])
    if (ax, ay) == stand:
        return np.array(push, dtype=np.float64)
    # walk to the push position without bumping the block
    nx, ny = stand[0] - ax, stand[1] - ay
    axes = [0, 1] if abs(nx) >= abs(ny) else [1, 0]
    for axis in axes:
        d = (nx, ny)[axis]
        if d == 0:
            continue
        mv = (int(np.sign(d)), 0) if axis == 0 else (0, int(np.sign(d)))
        tgt = (ax + mv[0], ay + mv[1])
        if tgt != (bx, by) and not is_wall(*tgt):
            return np.array(mv, dtype=np.float64)
    # desired move lands on the block: sidestep perpendicular to it
    perp_axis = 1 if abs(nx) >= abs(ny) else 0
    for d in (1, -1):
        mv = (0, d) if perp_axis == 1 else (d, 0)
        tgt = (ax + mv[0], ay + mv[1])
        if tgt != (bx, by) and not is_wall(*tgt):
            return np.array(mv, dtype=np.float64)
    return np.zeros(2)
