"""ArmWorld-3: a 3-link planar arm reaches for a target cell at 10 Hz.

Joint angles live on an integer lattice of 72 ticks per turn, so state is
exact; only rendering goes through floats. Actions are per-joint tick
deltas in [-1, 1], rounded to {-1, 0, 1}.
"""

import itertools
import math

import numpy as np

from .core import DomainSpec, EnvState
from .draw import (CELL, COLORS, GRID, IMG_SIZE, blank_frame, draw_cell_ring,
                   fill_cell_interior, line_points)

SPEC = DomainSpec(
    id=1,
    name="ArmWorld-3",
    action_dim=3,
    native_hz=10,
    action_bounds=((-1.0, 1.0),) * 3,
)

TICKS = 72
LINKS = (14.0, 10.0, 6.0)
BASE = (32.0, 32.0)  # (row, col) pixel of the shoulder

_DELTAS = sorted(itertools.product((-1, 0, 1), repeat=3))


def _joint_points(ticks):
    """Pixel positions (row, col) of shoulder, elbows and tip."""
    pts = [BASE]
    phi = 0.0
    r, c = BASE
    for tk, ln in zip(ticks, LINKS):
        phi += tk * (2.0 * math.pi / TICKS)
        r += ln * math.sin(phi)
        c += ln * math.cos(phi)
        pts.append((r, c))
    return pts


def tip_cell(ticks):
    r, c = _joint_points(ticks)[-1]
    return int(round(c)) // CELL, int(round(r)) // CELL  # (x, y)


def _target_cells():
    cells = []
    for y in range(GRID):
        for x in range(GRID):
            rr = y * CELL + 1.5 - BASE[0]
            cc = x * CELL + 1.5 - BASE[1]
            if 12.0 <= math.hypot(rr, cc) <= 28.0:
                cells.append((x, y))
    return cells


_TARGETS = _target_cells()


def init_state(rng):
    ticks = tuple(int(rng.integers(0, TICKS)) for _ in range(3))
    tx, ty = _TARGETS[int(rng.integers(len(_TARGETS)))]
    return EnvState(domain_id=SPEC.id, pose=(*ticks, tx, ty))


def step(state, action):
    t1, t2, t3, tx, ty = state.pose
    d = np.rint(SPEC.clamp(action)).astype(int)
    ticks = ((t1 + d[0]) % TICKS, (t2 + d[1]) % TICKS, (t3 + d[2]) % TICKS)
    return state.advanced((*ticks, tx, ty))


def render(state):
    t1, t2, t3, tx, ty = state.pose
    # links are rasterized at half resolution and upsampled 2x; this keeps
    # the set of distinct 4x4 patches small enough for an exact codebook
    half = np.zeros((IMG_SIZE // 2, IMG_SIZE // 2), dtype=bool)
    pts = _joint_points((t1, t2, t3))
    for p0, p1 in zip(pts[:-1], pts[1:]):
        a = (int(round(p0[0] / 2)), int(round(p0[1] / 2)))
        b = (int(round(p1[0] / 2)), int(round(p1[1] / 2)))
        for r, c in line_points(a, b):
            if 0 <= r < half.shape[0] and 0 <= c < half.shape[1]:
                half[r, c] = True
    f = blank_frame()
    f[np.kron(half, np.ones((2, 2), dtype=bool))] = COLORS["wall"]
    draw_cell_ring(f, tx, ty, COLORS["goal"])
    cx, cy = tip_cell((t1, t2, t3))
    if 0 <= cx < GRID and 0 <= cy < GRID:
        fill_cell_interior(f, cx, cy, COLORS["block"])
    return f


def success(state):
    t1, t2, t3, tx, ty = state.pose
    return tip_cell((t1, t2, t3)) == (tx, ty)


def _tip_dist(ticks, tx, ty):
    r, c = _joint_points(ticks)[-1]
    return math.hypot(r - (ty * CELL + 1.5), c - (tx * CELL + 1.5))


def greedy(state, rng):
    """One-step hill climb over the 27 tick deltas."""
    t1, t2, t3, tx, ty = state.pose
    best, best_d = (0, 0, 0), math.inf
    for d in _DELTAS:
        cand = ((t1 + d[0]) % TICKS, (t2 + d[1]) % TICKS, (t3 + d[2]) % TICKS)
        dist = _tip_dist(cand, tx, ty)
        if dist < best_d - 1e-12:
            best, best_d = d, dist
    if best == (0, 0, 0) and not success(state):
        # local minimum: jiggle out
        return np.array(_DELTAS[int(rng.integers(len(_DELTAS)))], dtype=np.float64)
    return np.array(best, dtype=np.float64)
