"""Differentiable physics residuals for the plane-stress thermoelastic system.

Seven residual fields: two displacement-equilibrium residuals and three
constitutive residuals evaluated at interior nodes, plus two boundary
residuals (traction mismatch on the outer edge, clamp mismatch on hole
rings).  `pde_loss` folds them into one scalar,

    L_pde = mean_interior[ sum of squared scaled residuals ]
          + mean_boundary[ squared scaled bc residuals ]

The formulas are written against a small `ops` protocol (derivatives plus
class masks) so the same code runs on numpy arrays and on torch tensors
(see `torchops`); only +, -, *, ** and .sum() are used elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import MaterialParams, NodeClassField
from . import stencils
from .stencils import DiffKind


@dataclass(frozen=True)
class ResidualScales:
    """Characteristic magnitudes dividing each residual family.

    With the default constants the raw constitutive residuals run ~1e4x
    larger than the equilibrium ones; dividing by these puts all seven on a
    comparable footing so no single term dominates the loss.
    """

    s_u: float      # equilibrium rows, (1+mu)*alpha*T_char/h
    s_sigma: float  # constitutive rows, E*alpha*T_char/(1-mu)
    s_b: float      # boundary rows, (1+mu)*alpha*T_char

    def __post_init__(self):
        if min(self.s_u, self.s_sigma, self.s_b) <= 0:
            raise ValueError("residual scales must be positive")

    @classmethod
    def for_material(cls, mat: MaterialParams, t_char: float, h: float) -> "ResidualScales":
        if t_char <= 0 or h <= 0:
            raise ValueError("t_char and h must be positive")
        mu, alpha = mat.poisson_mu, mat.alpha_expansion
        return cls(s_u=(1.0 + mu) * alpha * t_char / h,
                   s_sigma=mat.youngs_E * alpha * t_char / (1.0 - mu),
                   s_b=(1.0 + mu) * alpha * t_char)


@dataclass
class ResidualBundle:
    """Masked residual fields; interior ones zero off-Interior, bc ones zero
    off the outer edge and hole rings."""

    r_ux: object
    r_uy: object
    r_sxx: object
    r_syy: object
    r_sxy: object
    r_bc_x: object
    r_bc_y: object


class NumpyOps:
    """Derivative + mask provider over one NodeClassField.

    route="shift" uses the shifted-array evaluator, route="kernel" the
    convolution-style one; the two are bit-identical by construction.
    """

    def __init__(self, classes: NodeClassField, route: str = "shift"):
        if route not in ("shift", "kernel"):
            raise ValueError(f"unknown route {route!r}")
        self.classes = classes
        self.route = route
        self.interior_mask = classes.interior.astype(np.float64)
        self.outer_mask = classes.outer_boundary.astype(np.float64)
        self.hole_ring_mask = classes.hole_boundary.astype(np.float64)
        self.bc_mask = self.outer_mask + self.hole_ring_mask
        self.normal_l = classes.normal_l
        self.normal_m = classes.normal_m
        self.n_interior = int(classes.interior.sum())
        self.n_bc = int(self.bc_mask.sum())

    def _d(self, f, kind: DiffKind):
        if self.route == "shift":
            return stencils.diff(f, kind, self.classes)
        spec = stencils.as_kernel(kind, self.classes.grid.h)
        return stencils.apply_kernel(f, spec, self.classes)

    def dx(self, f):
        return self._d(f, DiffKind.DX)

    def dy(self, f):
        return self._d(f, DiffKind.DY)

    def dxx(self, f):
        return self._d(f, DiffKind.DXX)

    def dyy(self, f):
        return self._d(f, DiffKind.DYY)

    def dxy(self, f):
        return self._d(f, DiffKind.DXY)


def _ops_for(classes: NodeClassField, route: str = "shift") -> NumpyOps:
    key = ("numpy_ops", route)
    if key not in classes._cache:
        classes._cache[key] = NumpyOps(classes, route=route)
    return classes._cache[key]


def residual_fields(ops, mat: MaterialParams, ux, uy, sxx, syy, sxy, T) -> ResidualBundle:
    """All seven masked residual fields, backend-agnostic."""
    mu, e, alpha = mat.poisson_mu, mat.youngs_E, mat.alpha_expansion
    c1 = (1.0 - mu) / 2.0
    c2 = (1.0 + mu) / 2.0
    c3 = (1.0 + mu) * alpha

    dx_ux, dy_ux = ops.dx(ux), ops.dy(ux)
    dx_uy, dy_uy = ops.dx(uy), ops.dy(uy)

    r_ux = (ops.dxx(ux) + c1 * ops.dyy(ux) + c2 * ops.dxy(uy)
            - c3 * ops.dx(T)) * ops.interior_mask
    r_uy = (ops.dyy(uy) + c1 * ops.dxx(uy) + c2 * ops.dxy(ux)
            - c3 * ops.dy(T)) * ops.interior_mask

    thermal = e * alpha * T / (1.0 - mu)
    r_sxx = (sxx - (e / (1.0 - mu**2) * (dx_ux + mu * dy_uy) - thermal)) * ops.interior_mask
    r_syy = (syy - (e / (1.0 - mu**2) * (dy_uy + mu * dx_ux) - thermal)) * ops.interior_mask
    r_sxy = (sxy - e / (2.0 * (1.0 + mu)) * (dx_uy + dy_ux)) * ops.interior_mask

    l, m = ops.normal_l, ops.normal_m
    traction_x = (l * (dx_ux + mu * dy_uy) + m * c1 * (dy_ux + dx_uy)
                  - l * c3 * T) * ops.outer_mask
    traction_y = (m * (dy_uy + mu * dx_ux) + l * c1 * (dx_uy + dy_ux)
                  - m * c3 * T) * ops.outer_mask
    r_bc_x = traction_x + ux * ops.hole_ring_mask  # clamp mismatch on rings
    r_bc_y = traction_y + uy * ops.hole_ring_mask
    return ResidualBundle(r_ux=r_ux, r_uy=r_uy, r_sxx=r_sxx, r_syy=r_syy,
                          r_sxy=r_sxy, r_bc_x=r_bc_x, r_bc_y=r_bc_y)


def scaled_loss(ops, bundle: ResidualBundle, scales: ResidualScales):
    """Interior mean of the five squared scaled residuals plus boundary mean
    of the two squared scaled bc residuals.  Batch dims average out."""
    n_batch = 1
    for d in bundle.r_ux.shape[:-2]:
        n_batch *= d
    su2, ss2, sb2 = scales.s_u**2, scales.s_sigma**2, scales.s_b**2
    interior = (bundle.r_ux**2 / su2 + bundle.r_uy**2 / su2
                + bundle.r_sxx**2 / ss2 + bundle.r_syy**2 / ss2
                + bundle.r_sxy**2 / ss2).sum() / (ops.n_interior * n_batch)
    boundary = (bundle.r_bc_x**2 / sb2
                + bundle.r_bc_y**2 / sb2).sum() / (ops.n_bc * n_batch)
    return interior + boundary


def equilibrium_residual(ux, uy, T, mat: MaterialParams,
                         classes: NodeClassField) -> tuple[np.ndarray, np.ndarray]:
    """Displacement-equilibrium residuals at interior nodes, zero elsewhere."""
    ops = _ops_for(classes)
    mu, alpha = mat.poisson_mu, mat.alpha_expansion
    c1, c2, c3 = (1.0 - mu) / 2.0, (1.0 + mu) / 2.0, (1.0 + mu) * alpha
    r_ux = (ops.dxx(ux) + c1 * ops.dyy(ux) + c2 * ops.dxy(uy)
            - c3 * ops.dx(T)) * ops.interior_mask
    r_uy = (ops.dyy(uy) + c1 * ops.dxx(uy) + c2 * ops.dxy(ux)
            - c3 * ops.dy(T)) * ops.interior_mask
    return r_ux, r_uy


def constitutive_residual(pred, mat: MaterialParams,
                          classes: NodeClassField) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stress-vs-strain mismatch of a FieldSample at interior nodes."""
    bundle = residual_fields(_ops_for(classes), mat, pred.ux, pred.uy,
                             pred.sxx, pred.syy, pred.sxy, pred.T)
    return bundle.r_sxx, bundle.r_syy, bundle.r_sxy


def boundary_residual(pred, mat: MaterialParams,
                      classes: NodeClassField) -> tuple[np.ndarray, np.ndarray]:
    """Traction mismatch on the outer edge plus clamp mismatch on hole rings."""
    bundle = residual_fields(_ops_for(classes), mat, pred.ux, pred.uy,
                             pred.sxx, pred.syy, pred.sxy, pred.T)
    return bundle.r_bc_x, bundle.r_bc_y


def pde_loss(pred, mat: MaterialParams, classes: NodeClassField,
             scales: ResidualScales, route: str = "shift") -> float:
    """Scalar physics loss of a FieldSample."""
    ops = _ops_for(classes, route=route)
    bundle = residual_fields(ops, mat, pred.ux, pred.uy,
                             pred.sxx, pred.syy, pred.sxy, pred.T)
    return float(scaled_loss(ops, bundle, scales))
