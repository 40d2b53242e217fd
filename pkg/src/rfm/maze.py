"""Random maze meshes built from a breadth-first spanning tree of grid cells."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, MeshError
from .mesh import TriangleMesh
from .rng import make_rng

CELL = 8
GAP = 2
PITCH = CELL + GAP


@dataclass
class Maze:
    rows: int
    cols: int
    seed: int
    mesh: TriangleMesh
    open_walls: list = field(default_factory=list)  # [((r, c), (r2, c2)), ...]
    scale: float = 1.0
    offset: float = 0.0

    def cell_center(self, r, c):
        """Centre of cell (r, c) in normalised coordinates."""
        raw = np.array([c * PITCH + CELL / 2, r * PITCH + CELL / 2], dtype=float)
        return raw * self.scale + self.offset

    @property
    def cell_width(self) -> float:
        return CELL * self.scale

    @property
    def center_cell(self):
        return (self.rows // 2, self.cols // 2)

    @property
    def corner_cells(self):
        r, c = self.rows - 1, self.cols - 1
        return [(0, 0), (0, c), (r, 0), (r, c)]

    def sidecar_text(self) -> str:
        lines = [f"# maze rows={self.rows} cols={self.cols} seed={self.seed}"]
        sr, sc = self.center_cell
        x, y = self.cell_center(sr, sc)
        lines.append(f"source {sr} {sc} {x!r} {y!r}")
        for r, c in self.corner_cells:
            x, y = self.cell_center(r, c)
            lines.append(f"target {r} {c} {x!r} {y!r}")
        return "\n".join(lines) + "\n"


def _spanning_tree(rows, cols, rng):
    visited = np.zeros((rows, cols), dtype=bool)
    visited[0, 0] = True
    queue = deque([(0, 0)])
    walls = []
    while queue:
        r, c = queue.popleft()
        nbrs = [(r + dr, c + dc) for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0))]
        nbrs = [(a, b) for a, b in nbrs if 0 <= a < rows and 0 <= b < cols]
        for i in rng.permutation(len(nbrs)):
            a, b = nbrs[i]
            if not visited[a, b]:
                visited[a, b] = True
                walls.append(tuple(sorted([(r, c), (a, b)])))
                queue.append((a, b))
    return walls


def generate_maze(rows: int, cols: int, seed: int = 0) -> Maze:
    """Cells are 8x8 unit squares on a pitch of 10; an open wall becomes a 2x8 connector.

    Every unit square is split into two congruent right triangles and the
    result is scaled uniformly into (0, 1)^2.
    """
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise ContractViolation("maze needs at least two cells")
    rng = make_rng(seed, stream=0)
    walls = _spanning_tree(rows, cols, rng)
    width, height = cols * PITCH - GAP, rows * PITCH - GAP
    filled = np.zeros((height, width), dtype=bool)  # [y, x] unit squares
    for r in range(rows):
        for c in range(cols):
            filled[r * PITCH : r * PITCH + CELL, c * PITCH : c * PITCH + CELL] = True
    for (r, c), (r2, c2) in walls:
        if r2 == r:  # horizontal neighbour: 2 wide, 8 tall
            filled[r * PITCH : r * PITCH + CELL, c * PITCH + CELL : c2 * PITCH] = True
        else:
            filled[r * PITCH + CELL : r2 * PITCH, c * PITCH : c * PITCH + CELL] = True

    vid = -np.ones((height + 1, width + 1), dtype=np.int64)
    ys, xs = np.nonzero(filled)
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        vid[ys + dy, xs + dx] = 0
    corner_y, corner_x = np.nonzero(vid == 0)
    vid[corner_y, corner_x] = np.arange(len(corner_y))
    verts = np.stack([corner_x, corner_y], axis=1).astype(float)
    v00, v10 = vid[ys, xs], vid[ys, xs + 1]
    v01, v11 = vid[ys + 1, xs], vid[ys + 1, xs + 1]
    faces = np.concatenate([np.stack([v00, v10, v11], 1), np.stack([v00, v11, v01], 1)])

    extent = float(max(width, height))
    scale = 1.0 / (extent + 1.0)
    offset = 0.5 * scale
    mesh = TriangleMesh(verts * scale + offset, faces)
    if mesh.connected_components() != 1:
        raise MeshError("maze mesh is disconnected")
    return Maze(rows, cols, seed, mesh, walls, scale, offset)


def generate_maze_mesh(rows: int, cols: int, seed: int = 0) -> TriangleMesh:
    return generate_maze(rows, cols, seed).mesh
