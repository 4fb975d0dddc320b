"""Torch realization of the derivative/mask protocol used by `residual`.

Each derivative kind becomes one sparse COO matrix applied to flattened
(batch, ny*nx) tensors, so residual formulas stay differentiable with
respect to every predicted field.  Kept separate from `residual` so the
numpy-only paths (solver, datastore) never import torch.
"""

from __future__ import annotations

import numpy as np
import torch

from .geometry import NodeClassField
from . import stencils
from .stencils import DiffKind

_KINDS = (DiffKind.DX, DiffKind.DY, DiffKind.DXX, DiffKind.DYY, DiffKind.DXY)


def _to_sparse(mat, dtype, device) -> torch.Tensor:
    coo = mat.tocoo()
    idx = torch.from_numpy(np.vstack([coo.row, coo.col]).astype(np.int64))
    val = torch.from_numpy(coo.data.astype(np.float64)).to(dtype)
    return torch.sparse_coo_tensor(idx, val, size=coo.shape, dtype=dtype,
                                   device=device,
                                   check_invariants=False).coalesce()


class TorchOps:
    """Derivatives and class masks over batched (…, ny, nx) torch tensors."""

    def __init__(self, classes: NodeClassField, device: str = "cpu",
                 dtype: torch.dtype = torch.float64):
        grid = classes.grid
        self.grid = grid
        self.device = torch.device(device)
        self.dtype = dtype
        self._ops = {k: _to_sparse(stencils.operator_matrix(k, classes),
                                   dtype, self.device) for k in _KINDS}

        def t(arr):
            return torch.from_numpy(np.array(arr, dtype=np.float64)).to(
                dtype=dtype, device=self.device)

        self.interior_mask = t(classes.interior)
        self.outer_mask = t(classes.outer_boundary)
        self.hole_ring_mask = t(classes.hole_boundary)
        self.bc_mask = self.outer_mask + self.hole_ring_mask
        self.active_mask = t(classes.active)
        self.normal_l = t(classes.normal_l)
        self.normal_m = t(classes.normal_m)
        self.n_interior = int(classes.interior.sum())
        self.n_bc = int(self.bc_mask.sum().item())

    def _apply(self, kind: DiffKind, f: torch.Tensor) -> torch.Tensor:
        grid = self.grid
        if f.shape[-2:] != (grid.ny, grid.nx):
            raise ValueError(f"field shape {tuple(f.shape)} does not end in "
                             f"({grid.ny}, {grid.nx})")
        flat = f.reshape(-1, grid.n_nodes)
        out = torch.sparse.mm(self._ops[kind], flat.transpose(0, 1))
        return out.transpose(0, 1).reshape(f.shape)

    def dx(self, f):
        return self._apply(DiffKind.DX, f)

    def dy(self, f):
        return self._apply(DiffKind.DY, f)

    def dxx(self, f):
        return self._apply(DiffKind.DXX, f)

    def dyy(self, f):
        return self._apply(DiffKind.DYY, f)

    def dxy(self, f):
        return self._apply(DiffKind.DXY, f)
