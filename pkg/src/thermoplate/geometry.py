"""Plate domain, screw holes, uniform grid, node classification, boundary normals.

The board is a rectangle [0, L] x [0, H] with circular holes whose rims are
clamped (u = 0).  A uniform square-cell grid covers the rectangle; every node
gets exactly one class:

    INTERIOR       governed by the equilibrium PDE
    OUTER_BOUNDARY traction-free outer rim, carries an outward normal (l, m)
    HOLE_BOUNDARY  one-node-thick clamped ring around each hole
    HOLE_INTERIOR  inside a hole; fields are zeroed / masked out there

Classification is a staircase rasterization: a node is HOLE_BOUNDARY when it
lies within half a cell of a hole circle, or when it separates hole interior
from exterior (8-adjacency), so derivative stencils centered outside a hole
never read hole-interior values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Hole = tuple[float, float, float]  # (cx, cy, radius), meters

# Node class codes.
INTERIOR = 0
OUTER_BOUNDARY = 1
HOLE_BOUNDARY = 2
HOLE_INTERIOR = 3

DEFAULT_SIDE = 0.2  # m
DEFAULT_HOLE_RADIUS = 0.005  # m


class GeometryError(ValueError):
    """Invalid board geometry or a hole the grid cannot resolve."""


def default_holes(length: float = DEFAULT_SIDE, height: float = DEFAULT_SIDE,
                  radius: float = DEFAULT_HOLE_RADIUS) -> tuple[Hole, ...]:
    """Four screw holes, symmetric about both midlines (corner-screw layout)."""
    return (
        (0.25 * length, 0.25 * height, radius),
        (0.75 * length, 0.25 * height, radius),
        (0.25 * length, 0.75 * height, radius),
        (0.75 * length, 0.75 * height, radius),
    )


@dataclass(frozen=True)
class BoardGeometry:
    length: float = DEFAULT_SIDE
    height: float = DEFAULT_SIDE
    holes: tuple[Hole, ...] = ()

    def __post_init__(self):
        if not (self.length > 0 and self.height > 0):
            raise GeometryError("board side lengths must be positive")
        holes = tuple(tuple(float(v) for v in hole) for hole in self.holes)
        object.__setattr__(self, "holes", holes)
        for cx, cy, r in holes:
            if r <= 0:
                raise GeometryError("hole radius must be positive")
            if not (cx - r > 0 and cx + r < self.length and cy - r > 0 and cy + r < self.height):
                raise GeometryError(
                    f"hole ({cx}, {cy}, r={r}) does not lie strictly inside the board")
        for a in range(len(holes)):
            for b in range(a + 1, len(holes)):
                xa, ya, ra = holes[a]
                xb, yb, rb = holes[b]
                if math.hypot(xa - xb, ya - yb) <= ra + rb:
                    raise GeometryError(f"holes {a} and {b} overlap")


@dataclass(frozen=True)
class MaterialParams:
    """Isotropic thermoelastic constants (consistent nondimensional set)."""

    youngs_E: float = 50e3
    poisson_mu: float = 0.2
    alpha_expansion: float = 1e-5
    k_thermal: float = 1.0  # stored for provenance, unused by elasticity
    T_ref: float = 273.0

    def __post_init__(self):
        if not 0 < self.poisson_mu < 0.5:
            raise GeometryError("poisson ratio must lie in (0, 0.5)")
        if self.youngs_E <= 0 or self.alpha_expansion <= 0:
            raise GeometryError("youngs_E and alpha_expansion must be positive")


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    h: float

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    def x_coords(self) -> np.ndarray:
        return np.arange(self.nx) * self.h

    def y_coords(self) -> np.ndarray:
        return np.arange(self.ny) * self.h


@dataclass
class NodeClassField:
    """Per-node class codes plus outward normals on the outer boundary.

    Arrays have shape (ny, nx); node (i, j) sits at (i*h, j*h) and maps to
    ``array[j, i]`` (flat index j*nx + i).  Immutable after construction.
    """

    grid: GridSpec
    classes: np.ndarray
    normal_l: np.ndarray
    normal_m: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for arr in (self.classes, self.normal_l, self.normal_m):
            arr.setflags(write=False)

    @property
    def interior(self) -> np.ndarray:
        return self.classes == INTERIOR

    @property
    def outer_boundary(self) -> np.ndarray:
        return self.classes == OUTER_BOUNDARY

    @property
    def hole_boundary(self) -> np.ndarray:
        return self.classes == HOLE_BOUNDARY

    @property
    def hole_interior(self) -> np.ndarray:
        return self.classes == HOLE_INTERIOR

    @property
    def active(self) -> np.ndarray:
        """Everything a derivative stencil may read (not hole interior)."""
        return self.classes != HOLE_INTERIOR


def build_grid(board: BoardGeometry, nx: int, ny: int) -> tuple[GridSpec, NodeClassField]:
    """Rasterize the board onto an nx-by-ny grid and classify every node."""
    if nx < 5 or ny < 5:
        raise GeometryError("need nx >= 5 and ny >= 5 for one-sided stencils")
    hx = board.length / (nx - 1)
    hy = board.height / (ny - 1)
    if abs(hx - hy) > 1e-12 * max(hx, hy):
        raise GeometryError(f"cells must be square: L/(nx-1)={hx} vs H/(ny-1)={hy}")
    h = hx
    grid = GridSpec(nx=nx, ny=ny, h=h)

    x = grid.x_coords()[None, :]
    y = grid.y_coords()[:, None]

    hole_interior = np.zeros((ny, nx), dtype=bool)
    hole_band = np.zeros((ny, nx), dtype=bool)
    for cx, cy, r in board.holes:
        if r < h:
            raise GeometryError(
                f"unresolvable hole: radius {r} is narrower than the grid can "
                f"resolve (need r >= h = {h})")
        dist = np.hypot(x - cx, y - cy)
        hole_interior |= dist < r - 0.5 * h
        band = np.abs(dist - r) <= 0.5 * h
        if not band.any():
            raise GeometryError(f"unresolvable hole at ({cx}, {cy}): no ring nodes")
        hole_band |= band

    # Close the ring: any node 8-adjacent to hole interior separates interior
    # from exterior and joins the clamped band.
    if hole_interior.any():
        padded = np.zeros((ny + 2, nx + 2), dtype=bool)
        padded[1:-1, 1:-1] = hole_interior
        near = np.zeros((ny, nx), dtype=bool)
        for dj in (-1, 0, 1):
            for di in (-1, 0, 1):
                if di == 0 and dj == 0:
                    continue
                near |= padded[1 + dj:ny + 1 + dj, 1 + di:nx + 1 + di]
        hole_band |= near & ~hole_interior

    classes = np.full((ny, nx), INTERIOR, dtype=np.uint8)
    edge = np.zeros((ny, nx), dtype=bool)
    edge[0, :] = edge[-1, :] = True
    edge[:, 0] = edge[:, -1] = True
    classes[edge] = OUTER_BOUNDARY
    classes[hole_band & ~hole_interior] = HOLE_BOUNDARY
    classes[hole_interior] = HOLE_INTERIOR

    outer = classes == OUTER_BOUNDARY
    i_idx = np.broadcast_to(np.arange(nx)[None, :], (ny, nx))
    j_idx = np.broadcast_to(np.arange(ny)[:, None], (ny, nx))
    lraw = np.where(i_idx == nx - 1, 1.0, 0.0) - np.where(i_idx == 0, 1.0, 0.0)
    mraw = np.where(j_idx == ny - 1, 1.0, 0.0) - np.where(j_idx == 0, 1.0, 0.0)
    norm = np.hypot(lraw, mraw)
    with np.errstate(invalid="ignore"):
        normal_l = np.where(outer, lraw / np.where(norm == 0, 1.0, norm), 0.0)
        normal_m = np.where(outer, mraw / np.where(norm == 0, 1.0, norm), 0.0)

    return grid, NodeClassField(grid=grid, classes=classes,
                                normal_l=normal_l, normal_m=normal_m)


def outward_normal(classes: NodeClassField, i: int, j: int) -> tuple[float, float]:
    """Outward unit normal (l, m) at outer-boundary node (i, j)."""
    if classes.classes[j, i] != OUTER_BOUNDARY:
        raise GeometryError(f"node ({i}, {j}) is not on the outer boundary")
    return float(classes.normal_l[j, i]), float(classes.normal_m[j, i])
