"""Gaussian-random-field temperature inputs.

Stationary squared-exponential covariance C(d) = variance * exp(-d^2 / 2 l^2)
on the uniform grid.  On a tensor grid this kernel factorizes into
C = Ky (x) Kx (Kronecker), so a realization is mean + sqrt(var) * Ly Z Lx^T
with Z iid standard normal and Kx = Lx Lx^T, Ky = Ly Ly^T -- an exact dense
factorization that only ever decomposes nx-by-nx and ny-by-ny blocks.

Fields are defined on the full rectangle (hole interiors included): the input
raster describes a solid board.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GridSpec

JITTERS = (1e-10, 1e-8, 1e-6)


class CovarianceError(RuntimeError):
    """Covariance factorization failed even after jitter escalation."""


@dataclass(frozen=True)
class GrfConfig:
    mean: float = 0.0
    variance: float = 1.0
    length_scale: float = 0.04  # 0.2 * default board side
    t_min: float | None = 0.0   # rescale range; None disables rescaling
    t_max: float | None = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be >= 0")
        if self.length_scale <= 0:
            raise ValueError("length_scale must be > 0")
        if (self.t_min is None) != (self.t_max is None):
            raise ValueError("t_min and t_max must be set together")
        if self.t_min is not None and self.t_min > self.t_max:
            raise ValueError("need t_min <= t_max")


def _chol_factor(coords: np.ndarray, length_scale: float) -> np.ndarray:
    d2 = (coords[:, None] - coords[None, :]) ** 2
    k = np.exp(-d2 / (2.0 * length_scale**2))
    for jitter in JITTERS:
        try:
            return np.linalg.cholesky(k + jitter * np.eye(len(coords)))
        except np.linalg.LinAlgError:
            continue
    raise CovarianceError(
        f"covariance factorization failed for n={len(coords)} after jitter "
        f"escalation up to {JITTERS[-1]}")


def sample_temperature(grid: GridSpec, cfg: GrfConfig) -> np.ndarray:
    """Draw one temperature field (ny, nx); deterministic for a fixed seed."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    z = rng.standard_normal((grid.ny, grid.nx))
    if cfg.variance == 0.0:
        field = np.full((grid.ny, grid.nx), cfg.mean)
    else:
        lx = _chol_factor(grid.x_coords(), cfg.length_scale)
        ly = _chol_factor(grid.y_coords(), cfg.length_scale)
        field = cfg.mean + np.sqrt(cfg.variance) * (ly @ z @ lx.T)
    if cfg.t_min is None:
        return field
    lo, hi = field.min(), field.max()
    if hi - lo <= 0:
        return np.full_like(field, min(max(cfg.mean, cfg.t_min), cfg.t_max))
    return (field - lo) / (hi - lo) * (cfg.t_max - cfg.t_min) + cfg.t_min
