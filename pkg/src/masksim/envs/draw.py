"""Low-level raster helpers shared by all environments.

Everything is integer pixel math on a fixed 64x64 canvas: no anti-aliasing,
no blending, so every rendered pixel comes from the fixed palette and the
patch tokenizer can be exact.
"""

import numpy as np

CELL = 4          # pixels per grid cell
GRID = 16         # cells per side
IMG_SIZE = CELL * GRID
TARGET_HZ = 2     # control rate shared by every domain

COLORS = {
    "background": (0, 0, 0),
    "agent": (40, 80, 220),
    "block": (220, 50, 40),
    "goal": (40, 200, 80),
    "wall": (128, 128, 128),
}


def blank_frame():
    return np.zeros((IMG_SIZE, IMG_SIZE, 3), dtype=np.uint8)


def fill_cell(frame, x, y, color):
    """Paint the full 4x4 cell at grid position (x=col, y=row)."""
    frame[y * CELL:(y + 1) * CELL, x * CELL:(x + 1) * CELL] = color


def fill_cell_interior(frame, x, y, color):
    """Paint the 2x2 interior of a cell, leaving its 1px border alone."""
    frame[y * CELL + 1:y * CELL + 3, x * CELL + 1:x * CELL + 3] = color


def draw_cell_ring(frame, x, y, color):
    """Paint the 12 border pixels of a cell (the goal marker)."""
    r, c = y * CELL, x * CELL
    frame[r, c:c + CELL] = color
    frame[r + CELL - 1, c:c + CELL] = color
    frame[r:r + CELL, c] = color
    frame[r:r + CELL, c + CELL - 1] = color


def line_points(p0, p1):
    """Integer (row, col) points of a Bresenham segment."""
    r0, c0 = p0
    r1, c1 = p1
    dr, dc = abs(r1 - r0), -abs(c1 - c0)
    sr = 1 if r0 < r1 else -1
    sc = 1 if c0 < c1 else -1
    err = dr + dc
    pts = []
    while True:
        pts.append((r0, c0))
        e2 = 2 * err
        if e2 >= dc:
            if r0 == r1:
                return pts
            err += dc
            r0 += sr
        if e2 <= dr:
            if c0 == c1:
                return pts
            err += dr
            c0 += sc


def draw_line(frame, p0, p1, color):
    for r, c in line_points(p0, p1):
        if 0 <= r < IMG_SIZE and 0 <= c < IMG_SIZE:
            frame[r, c] = color


def ring_cells(frame):
    """Locate goal rings: grid cells whose border pixels are goal-colored.

    Returns a list of (x, y) cells. Works on generated frames too, where a
    ring may be imperfect; a cell qualifies if at least 9 of its 12 border
    pixels match the goal color.
    """
    goal = np.array(COLORS["goal"], dtype=np.uint8)
    hits = []
    green = (frame == goal).all(-1)
    for y in range(GRID):
        for x in range(GRID):
            r, c = y * CELL, x * CELL
            border = int(green[r, c:c + CELL].sum())
            border += int(green[r + CELL - 1, c:c + CELL].sum())
            border += int(green[r + 1:r + CELL - 1, c].sum())
            border += int(green[r + 1:r + CELL - 1, c + CELL - 1].sum())
            if border >= 9:
                hits.append((x, y))
    return hits
