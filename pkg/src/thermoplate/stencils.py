"""Finite-difference derivative operators on masked grids.

Interior nodes use the classical central formulas

    Dx  f = (f(+h) - f(-h)) / 2h          Dxx f = (f(+h) + f(-h) - 2 f0) / h^2
    Dxy f = [(f(+h,+h) + f(-h,-h)) - (f(+h,-h) - ... )] / 4h^2

and nodes whose required neighbor is outside the grid or inside a hole fall
back to the second-order one-sided forms

    Dx f = (-3 f0 + 4 f(+h) - f(+2h)) / 2h   or   (3 f0 - 4 f(-h) + f(-2h)) / 2h

(y analogues likewise).  Second derivatives without central support are built
by composing one-sided first derivatives, which is first-order accurate there;
all five kinds stay second-order at interior nodes.  Output at hole-interior
nodes is 0 by convention.

Every operator is also exposed as a convolution kernel plus boundary
correction rules (``as_kernel`` / ``apply_kernel``) and as a sparse matrix
(``operator_matrix``) for solver assembly and autograd backends.  The kernel
route shares its accumulation arithmetic with ``diff`` so the two agree bit
for bit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import HOLE_INTERIOR, NodeClassField


class StencilError(ValueError):
    """A node has no admissible stencil (grid too small or strip too thin)."""


class DiffKind(enum.Enum):
    DX = "dx"
    DY = "dy"
    DXX = "dxx"
    DYY = "dyy"
    DXY = "dxy"


FIRST_KINDS = (DiffKind.DX, DiffKind.DY)

Tap = tuple[int, int, float]  # (di, dj, coeff)


@dataclass(frozen=True)
class BoundaryRule:
    """Replacement stencil applied where the interior kernel lacks support.

    ``taps`` is the explicit one-sided row; ``compose`` names a pair of kinds
    (outer, inner) whose composition realizes the derivative instead.
    """

    name: str
    taps: tuple[Tap, ...] = ()
    compose: tuple[DiffKind, DiffKind] | None = None


@dataclass(frozen=True)
class KernelSpec:
    kind: DiffKind
    h: float
    interior: tuple[Tap, ...]
    boundary: tuple[BoundaryRule, ...]


def _interior_taps(kind: DiffKind, h: float) -> tuple[Tap, ...]:
    inv2h = 1.0 / (2.0 * h)
    invh2 = 1.0 / (h * h)
    inv4h2 = 1.0 / (4.0 * h * h)
    if kind is DiffKind.DX:
        return ((1, 0, inv2h), (-1, 0, -inv2h))
    if kind is DiffKind.DY:
        return ((0, 1, inv2h), (0, -1, -inv2h))
    if kind is DiffKind.DXX:
        return ((1, 0, invh2), (0, 0, -2.0 * invh2), (-1, 0, invh2))
    if kind is DiffKind.DYY:
        return ((0, 1, invh2), (0, 0, -2.0 * invh2), (0, -1, invh2))
    if kind is DiffKind.DXY:
        return ((1, 1, inv4h2), (-1, -1, inv4h2), (1, -1, -inv4h2), (-1, 1, -inv4h2))
    raise ValueError(kind)


def _one_sided_taps(kind: DiffKind, h: float, forward: bool) -> tuple[Tap, ...]:
    inv2h = 1.0 / (2.0 * h)
    s = 1 if forward else -1
    sign = 1.0 if forward else -1.0
    if kind is DiffKind.DX:
        return ((0, 0, -3.0 * sign * inv2h), (s, 0, 4.0 * sign * inv2h), (2 * s, 0, -sign * inv2h))
    if kind is DiffKind.DY:
        return ((0, 0, -3.0 * sign * inv2h), (0, s, 4.0 * sign * inv2h), (0, 2 * s, -sign * inv2h))
    raise ValueError(kind)


def as_kernel(kind: DiffKind, h: float) -> KernelSpec:
    """Interior convolution kernel plus boundary correction rules for `kind`."""
    interior = _interior_taps(kind, h)
    if kind in FIRST_KINDS:
        boundary = (
            BoundaryRule("forward", taps=_one_sided_taps(kind, h, forward=True)),
            BoundaryRule("backward", taps=_one_sided_taps(kind, h, forward=False)),
        )
    elif kind is DiffKind.DXX:
        boundary = (BoundaryRule("compose", compose=(DiffKind.DX, DiffKind.DX)),)
    elif kind is DiffKind.DYY:
        boundary = (BoundaryRule("compose", compose=(DiffKind.DY, DiffKind.DY)),)
    else:
        boundary = (BoundaryRule("compose", compose=(DiffKind.DX, DiffKind.DY)),)
    return KernelSpec(kind=kind, h=h, interior=interior, boundary=boundary)


def _shift(f: np.ndarray, di: int, dj: int) -> np.ndarray:
    """f evaluated at (i + di, j + dj), zero outside the grid."""
    ny, nx = f.shape
    out = np.zeros_like(f)
    xs_src = slice(max(di, 0), nx + min(di, 0))
    xs_dst = slice(max(-di, 0), nx + min(-di, 0))
    ys_src = slice(max(dj, 0), ny + min(dj, 0))
    ys_dst = slice(max(-dj, 0), ny + min(-dj, 0))
    out[ys_dst, xs_dst] = f[ys_src, xs_src]
    return out


def _accumulate(f: np.ndarray, taps: tuple[Tap, ...]) -> np.ndarray:
    di, dj, c = taps[0]
    out = c * _shift(f, di, dj)
    for di, dj, c in taps[1:]:
        out += c * _shift(f, di, dj)
    return out


def _avail_shift(active: np.ndarray, di: int, dj: int) -> np.ndarray:
    """True where the neighbor at (i+di, j+dj) exists and is readable."""
    ny, nx = active.shape
    out = np.zeros_like(active)
    xs_src = slice(max(di, 0), nx + min(di, 0))
    xs_dst = slice(max(-di, 0), nx + min(-di, 0))
    ys_src = slice(max(dj, 0), ny + min(dj, 0))
    ys_dst = slice(max(-dj, 0), ny + min(-dj, 0))
    out[ys_dst, xs_dst] = active[ys_src, xs_src]
    return out


def _form_masks(classes: NodeClassField, kind: DiffKind) -> dict[str, np.ndarray]:
    """0/1 masks selecting interior / forward / backward / compose per node."""
    key = ("forms", kind)
    if key in classes._cache:
        return classes._cache[key]

    active = classes.classes != HOLE_INTERIOR
    if kind in (DiffKind.DX, DiffKind.DY):
        if kind is DiffKind.DX:
            a_p1, a_m1 = _avail_shift(active, 1, 0), _avail_shift(active, -1, 0)
            a_p2, a_m2 = _avail_shift(active, 2, 0), _avail_shift(active, -2, 0)
        else:
            a_p1, a_m1 = _avail_shift(active, 0, 1), _avail_shift(active, 0, -1)
            a_p2, a_m2 = _avail_shift(active, 0, 2), _avail_shift(active, 0, -2)
        central = active & a_p1 & a_m1
        forward = active & ~central & a_p1 & a_p2
        backward = active & ~central & ~forward & a_m1 & a_m2
        uncovered = active & ~(central | forward | backward)
        if uncovered.any():
            j, i = np.argwhere(uncovered)[0]
            raise StencilError(
                f"node ({i}, {j}) has no admissible {kind.value} stencil "
                "(grid too small or hole strip too thin)")
        masks = {"interior": central, "forward": forward, "backward": backward}
    elif kind is DiffKind.DXX:
        central = active & _avail_shift(active, 1, 0) & _avail_shift(active, -1, 0)
        masks = {"interior": central, "compose": active & ~central}
    elif kind is DiffKind.DYY:
        central = active & _avail_shift(active, 0, 1) & _avail_shift(active, 0, -1)
        masks = {"interior": central, "compose": active & ~central}
    else:
        central = active
        for di, dj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            central = central & _avail_shift(active, di, dj)
        masks = {"interior": central, "compose": active & ~central}

    classes._cache[key] = masks
    return masks


def diff(f: np.ndarray, kind: DiffKind, classes: NodeClassField) -> np.ndarray:
    """Apply the derivative operator `kind` to field values `f`."""
    grid = classes.grid
    if f.shape != (grid.ny, grid.nx):
        raise ValueError(f"field shape {f.shape} != grid ({grid.ny}, {grid.nx})")
    spec = as_kernel(kind, grid.h)
    masks = _form_masks(classes, kind)

    out = np.zeros_like(f, dtype=np.float64)
    out = np.where(masks["interior"], _accumulate(f, spec.interior), out)
    for rule in spec.boundary:
        mask = masks.get(rule.name)
        if mask is None or not mask.any():
            continue
        if rule.compose is not None:
            outer, inner = rule.compose
            candidate = diff(diff(f, inner, classes), outer, classes)
        else:
            candidate = _accumulate(f, rule.taps)
        out = np.where(mask, candidate, out)
    return out


def apply_kernel(f: np.ndarray, spec: KernelSpec, classes: NodeClassField) -> np.ndarray:
    """Convolution-style realization: interior kernel swept over the whole
    grid, then boundary-correction rows overwrite unsupported nodes.

    Reproduces ``diff`` bit-identically.
    """
    grid = classes.grid
    if spec.h != grid.h:
        raise ValueError("kernel built for a different spacing")
    masks = _form_masks(classes, spec.kind)

    out = _accumulate(f, spec.interior)  # full-grid sweep
    for rule in spec.boundary:
        mask = masks.get(rule.name)
        if mask is None or not mask.any():
            continue
        if rule.compose is not None:
            outer, inner = rule.compose
            candidate = apply_kernel(
                apply_kernel(f, as_kernel(inner, grid.h), classes),
                as_kernel(outer, grid.h), classes)
        else:
            candidate = _accumulate(f, rule.taps)
        out = np.where(mask, candidate, out)
    covered = masks["interior"]
    for name, mask in masks.items():
        if name != "interior":
            covered = covered | mask
    return np.where(covered, out, 0.0)


def _taps_matrix(taps: tuple[Tap, ...], mask: np.ndarray, grid) -> sp.csr_matrix:
    """Sparse rows applying `taps` at every node selected by `mask`."""
    ny, nx = mask.shape
    jj, ii = np.nonzero(mask)
    rows, cols, data = [], [], []
    for di, dj, c in taps:
        rows.append(jj * nx + ii)
        cols.append((jj + dj) * nx + (ii + di))
        data.append(np.full(ii.shape, c))
    if not rows:
        return sp.csr_matrix((nx * ny, nx * ny))
    return sp.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nx * ny, nx * ny))


def operator_matrix(kind: DiffKind, classes: NodeClassField) -> sp.csr_matrix:
    """Sparse matrix D with (D @ f.ravel()).reshape(ny, nx) == diff(f, kind).

    Same coefficients as ``diff``; sums may associate differently, so matrix
    application agrees to rounding, not bitwise.
    """
    key = ("matrix", kind)
    if key in classes._cache:
        return classes._cache[key]
    grid = classes.grid
    spec = as_kernel(kind, grid.h)
    masks = _form_masks(classes, kind)

    mat = _taps_matrix(spec.interior, masks["interior"], grid)
    for rule in spec.boundary:
        mask = masks.get(rule.name)
        if mask is None or not mask.any():
            continue
        if rule.compose is not None:
            outer, inner = rule.compose
            composed = operator_matrix(outer, classes) @ operator_matrix(inner, classes)
            sel = sp.diags(mask.ravel().astype(np.float64))
            mat = mat + sel @ composed
        else:
            mat = mat + _taps_matrix(rule.taps, mask, grid)
    mat = mat.tocsr()
    mat.sum_duplicates()
    classes._cache[key] = mat
    return mat
