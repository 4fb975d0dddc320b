"""Ground-truth plane-stress thermoelastic solver.

Displacement-form equilibrium on the grid interior,

    Dxx ux + (1-mu)/2 Dyy ux + (1+mu)/2 Dxy uy = (1+mu) alpha Dx T
    Dyy uy + (1-mu)/2 Dxx uy + (1+mu)/2 Dxy ux = (1+mu) alpha Dy T

traction-free conditions on the outer boundary,

    l (Dx ux + mu Dy uy) + m (1-mu)/2 (Dy ux + Dx uy) = l (1+mu) alpha T
    m (Dy uy + mu Dx ux) + l (1-mu)/2 (Dx uy + Dy ux) = m (1+mu) alpha T

and u = 0 on hole rings/interiors.  Stresses follow from the constitutive
relations

    sxx = E/(1-mu^2) (Dx ux + mu Dy uy) - E alpha T / (1-mu)
    syy = E/(1-mu^2) (Dy uy + mu Dx ux) - E alpha T / (1-mu)
    sxy = E/(2(1+mu)) (Dx uy + Dy ux)

All derivatives come from `stencils`, so solver output satisfies the
discretized equations exactly to solver tolerance -- the physics-residual
loss of `residual` vanishes on generated samples by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import GridSpec, MaterialParams, NodeClassField
from . import stencils
from .stencils import DiffKind

FIELD_NAMES = ("T", "ux", "uy", "sxx", "syy", "sxy")
LABEL_NAMES = FIELD_NAMES[1:]


class SolverError(RuntimeError):
    pass


class SingularSystemError(SolverError):
    """System has unconstrained rigid-body modes (no holes, no pinning)."""


@dataclass
class FieldSample:
    """One training record: input T plus the five labels, all (ny, nx)."""

    grid: GridSpec
    T: np.ndarray
    ux: np.ndarray
    uy: np.ndarray
    sxx: np.ndarray
    syy: np.ndarray
    sxy: np.ndarray

    def field(self, name: str) -> np.ndarray:
        if name not in FIELD_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def validate(self):
        for name in FIELD_NAMES:
            arr = self.field(name)
            if arr.shape != (self.grid.ny, self.grid.nx):
                raise ValueError(f"field {name} has shape {arr.shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"field {name} contains non-finite values")


@dataclass
class LinearSystem:
    """Row-scaled sparse system for the stacked unknowns [ux.ravel(), uy.ravel()]."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    grid: GridSpec
    classes: NodeClassField
    pinned: tuple[tuple[int, int, str], ...]  # (i, j, component)
    has_constraints: bool


def pin_nodes(grid: GridSpec) -> tuple[tuple[int, int, str], ...]:
    """Rigid-mode pins for hole-free boards: ux=uy=0 at the center node and
    ux=0 one node above it (kills both translations and the rotation)."""
    ic, jc = grid.nx // 2, grid.ny // 2
    return ((ic, jc, "ux"), (ic, jc, "uy"), (ic, jc + 1, "ux"))


def assemble(grid: GridSpec, classes: NodeClassField, mat: MaterialParams,
             T: np.ndarray, pin_rigid_modes: bool = False) -> LinearSystem:
    mu, alpha = mat.poisson_mu, mat.alpha_expansion
    c1 = (1.0 - mu) / 2.0
    c2 = (1.0 + mu) / 2.0
    c3 = (1.0 + mu) * alpha
    h = grid.h
    nn = grid.n_nodes

    dx = stencils.operator_matrix(DiffKind.DX, classes)
    dy = stencils.operator_matrix(DiffKind.DY, classes)
    dxx = stencils.operator_matrix(DiffKind.DXX, classes)
    dyy = stencils.operator_matrix(DiffKind.DYY, classes)
    dxy = stencils.operator_matrix(DiffKind.DXY, classes)

    interior = classes.interior.ravel().astype(np.float64)
    outer = classes.outer_boundary.ravel().astype(np.float64)
    hole = (classes.hole_boundary | classes.hole_interior).ravel().astype(np.float64)
    s_int = sp.diags(interior * h * h)  # row scaling balances 1/h^2 interiors
    s_out = sp.diags(outer * h)         # against 1/h boundary rows
    lmat = sp.diags(classes.normal_l.ravel())
    mmat = sp.diags(classes.normal_m.ravel())

    a_xx = s_int @ (dxx + c1 * dyy) + s_out @ (lmat @ dx + c1 * (mmat @ dy)) + sp.diags(hole)
    a_xy = s_int @ (c2 * dxy) + s_out @ (mu * (lmat @ dy) + c1 * (mmat @ dx))
    a_yx = s_int @ (c2 * dxy) + s_out @ (mu * (mmat @ dx) + c1 * (lmat @ dy))
    a_yy = s_int @ (dyy + c1 * dxx) + s_out @ (mmat @ dy + c1 * (lmat @ dx)) + sp.diags(hole)

    t_flat = T.ravel()
    b_x = interior * h * h * (c3 * (dx @ t_flat)) + outer * h * (c3 * classes.normal_l.ravel() * t_flat)
    b_y = interior * h * h * (c3 * (dy @ t_flat)) + outer * h * (c3 * classes.normal_m.ravel() * t_flat)

    matrix = sp.bmat([[a_xx, a_xy], [a_yx, a_yy]], format="csr")
    rhs = np.concatenate([b_x, b_y])

    pinned: tuple[tuple[int, int, str], ...] = ()
    if pin_rigid_modes:
        pinned = pin_nodes(grid)
        rows = [j * grid.nx + i + (0 if comp == "ux" else nn) for i, j, comp in pinned]
        keep = np.ones(2 * nn)
        keep[rows] = 0.0
        matrix = sp.diags(keep) @ matrix + sp.csr_matrix(
            (np.ones(len(rows)), (rows, rows)), shape=(2 * nn, 2 * nn))
        rhs[rows] = 0.0

    matrix = matrix.tocsr()
    matrix.sum_duplicates()
    has_constraints = bool(hole.any()) or bool(pinned)
    return LinearSystem(matrix=matrix, rhs=rhs, grid=grid, classes=classes,
                        pinned=pinned, has_constraints=has_constraints)


def solve(system: LinearSystem, tol: float = 1e-10,
          method: str = "direct") -> tuple[np.ndarray, np.ndarray]:
    """Solve for (ux, uy) with relative algebraic residual <= tol."""
    if not 0 < tol <= 1e-6:
        raise ValueError("tol must lie in (0, 1e-6]")
    grid = system.grid
    nn = grid.n_nodes
    b_norm = np.linalg.norm(system.rhs)
    if b_norm == 0.0:
        zero = np.zeros((grid.ny, grid.nx))
        return zero, zero.copy()
    if not system.has_constraints:
        raise SingularSystemError(
            "no holes and no pinning: rigid-body modes make the system singular "
            "(assemble with pin_rigid_modes=True)")

    a = system.matrix
    if method == "direct":
        try:
            x = spla.splu(a.tocsc()).solve(system.rhs)
        except RuntimeError as exc:
            raise SingularSystemError(f"direct factorization failed: {exc}") from exc
    elif method == "iterative":
        ilu = spla.spilu(a.tocsc(), drop_tol=1e-8, fill_factor=20)
        precond = spla.LinearOperator(a.shape, ilu.solve)
        x, info = spla.gmres(a, system.rhs, rtol=tol * 1e-2, atol=0.0,
                             M=precond, maxiter=2000, restart=200)
        if info != 0:
            raise SolverError(f"gmres failed to converge (info={info})")
    else:
        raise ValueError(f"unknown method {method!r}")

    if not np.isfinite(x).all():
        raise SingularSystemError("solution is non-finite; system is singular")
    rel = np.linalg.norm(a @ x - system.rhs) / b_norm
    if rel > tol:
        raise SolverError(f"residual {rel:.3e} above tolerance {tol:.1e}")
    return x[:nn].reshape(grid.ny, grid.nx), x[nn:].reshape(grid.ny, grid.nx)


def stresses(ux: np.ndarray, uy: np.ndarray, T: np.ndarray, mat: MaterialParams,
             classes: NodeClassField) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu, e, alpha = mat.poisson_mu, mat.youngs_E, mat.alpha_expansion
    active = classes.active.astype(np.float64)
    dx_ux = stencils.diff(ux, DiffKind.DX, classes)
    dy_ux = stencils.diff(ux, DiffKind.DY, classes)
    dx_uy = stencils.diff(uy, DiffKind.DX, classes)
    dy_uy = stencils.diff(uy, DiffKind.DY, classes)
    thermal = e * alpha * T / (1.0 - mu)
    sxx = (e / (1.0 - mu**2) * (dx_ux + mu * dy_uy) - thermal) * active
    syy = (e / (1.0 - mu**2) * (dy_uy + mu * dx_ux) - thermal) * active
    sxy = (e / (2.0 * (1.0 + mu)) * (dx_uy + dy_ux)) * active
    return sxx, syy, sxy


def generate_sample(grid: GridSpec, classes: NodeClassField, mat: MaterialParams,
                    T: np.ndarray, tol: float = 1e-10,
                    pin_rigid_modes: bool = False) -> FieldSample:
    """assemble -> solve -> stresses; labels zeroed inside holes, T retained."""
    system = assemble(grid, classes, mat, T, pin_rigid_modes=pin_rigid_modes)
    ux, uy = solve(system, tol=tol)
    sxx, syy, sxy = stresses(ux, uy, T, mat, classes)
    active = classes.active.astype(np.float64)
    sample = FieldSample(grid=grid, T=T.copy(), ux=ux * active, uy=uy * active,
                         sxx=sxx, syy=syy, sxy=sxy)
    sample.validate()
    return sample
