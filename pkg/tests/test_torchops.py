import numpy as np
import pytest
import torch

from thermoplate.residual import (NumpyOps, ResidualScales, pde_loss,
                                  residual_fields, scaled_loss)
from thermoplate.stencils import DiffKind, operator_matrix
from thermoplate.torchops import TorchOps

KINDS = ("dx", "dy", "dxx", "dyy", "dxy")


@pytest.fixture(scope="module")
def tops(grid32):
    _, classes = grid32
    return TorchOps(classes)


class TestDerivatives:
    def test_matches_numpy_matrix_route(self, grid32, tops):
        grid, classes = grid32
        f = np.random.default_rng(0).normal(size=(grid.ny, grid.nx))
        ft = torch.from_numpy(f)
        for name, kind in zip(KINDS, (DiffKind.DX, DiffKind.DY, DiffKind.DXX,
                                      DiffKind.DYY, DiffKind.DXY)):
            want = (operator_matrix(kind, classes) @ f.ravel()).reshape(f.shape)
            got = getattr(tops, name)(ft).numpy()
            scale = max(np.abs(want).max(), 1.0)
            assert np.abs(got - want).max() < 1e-12 * scale, name

    def test_batched_equals_loop(self, grid32, tops):
        grid, _ = grid32
        batch = torch.from_numpy(
            np.random.default_rng(1).normal(size=(4, grid.ny, grid.nx)))
        whole = tops.dxx(batch)
        for b in range(4):
            one = tops.dxx(batch[b])
            assert torch.equal(whole[b], one)

    def test_shape_validation(self, tops):
        with pytest.raises(ValueError):
            tops.dx(torch.zeros(7, 9))

    def test_extra_leading_dims(self, grid32, tops):
        grid, _ = grid32
        f = torch.randn(2, 3, grid.ny, grid.nx, dtype=torch.float64)
        out = tops.dy(f)
        assert out.shape == f.shape
        assert torch.equal(out[1, 2], tops.dy(f[1, 2]))


class TestMasks:
    def test_masks_and_counts_match_numpy(self, grid32, tops):
        _, classes = grid32
        nops = NumpyOps(classes)
        assert np.array_equal(tops.interior_mask.numpy(), nops.interior_mask)
        assert np.array_equal(tops.outer_mask.numpy(), nops.outer_mask)
        assert np.array_equal(tops.hole_ring_mask.numpy(), nops.hole_ring_mask)
        assert np.array_equal(tops.normal_l.numpy(), nops.normal_l)
        assert tops.n_interior == nops.n_interior
        assert tops.n_bc == nops.n_bc

    def test_mask_copies_are_independent(self, grid32, tops):
        _, classes = grid32
        tops.interior_mask[0, 0] += 1.0
        try:
            assert classes.interior.dtype == bool
            assert not classes.interior[0, 0]
        finally:
            tops.interior_mask[0, 0] -= 1.0


class TestBackendAgreement:
    def test_pde_loss_matches_numpy(self, grid32, material, sample32):
        grid, classes = grid32
        scales = ResidualScales.for_material(material, 100.0, grid.h)
        rng = np.random.default_rng(3)
        fields = {}
        for name in ("ux", "uy", "sxx", "syy", "sxy", "T"):
            base = getattr(sample32, name).copy()
            if name != "T":
                base += rng.normal(size=base.shape) * (1e-6 if name[0] == "u" else 1.0)
            fields[name] = base

        tops = TorchOps(classes)
        bundle_t = residual_fields(
            tops, material, *[torch.from_numpy(fields[n])
                              for n in ("ux", "uy", "sxx", "syy", "sxy", "T")])
        loss_t = float(scaled_loss(tops, bundle_t, scales))

        nops = NumpyOps(classes)
        bundle_n = residual_fields(
            nops, material, *[fields[n]
                              for n in ("ux", "uy", "sxx", "syy", "sxy", "T")])
        loss_n = float(scaled_loss(nops, bundle_n, scales))
        assert loss_t == pytest.approx(loss_n, rel=1e-12)

    def test_solver_sample_near_zero_loss_in_torch(self, grid32, material,
                                                   sample32):
        grid, classes = grid32
        scales = ResidualScales.for_material(material, 100.0, grid.h)
        tops = TorchOps(classes)
        tensors = [torch.from_numpy(getattr(sample32, n).copy())
                   for n in ("ux", "uy", "sxx", "syy", "sxy", "T")]
        bundle = residual_fields(tops, material, *tensors)
        assert float(scaled_loss(tops, bundle, scales)) < 1e-12


class TestAutograd:
    def test_gradient_matches_central_differences(self, grid32, material,
                                                  sample32):
        grid, classes = grid32
        scales = ResidualScales.for_material(material, 100.0, grid.h)
        tops = TorchOps(classes)
        T = torch.from_numpy(sample32.T.copy())
        rng = np.random.default_rng(4)
        leaves = {n: torch.from_numpy(
            getattr(sample32, n) + rng.normal(size=(grid.ny, grid.nx))
            * (1e-6 if n[0] == "u" else 1.0)).requires_grad_(True)
            for n in ("ux", "uy", "sxx", "syy", "sxy")}

        def loss_of(tensors):
            bundle = residual_fields(tops, material, tensors["ux"],
                                     tensors["uy"], tensors["sxx"],
                                     tensors["syy"], tensors["sxy"], T)
            return scaled_loss(tops, bundle, scales)

        loss = loss_of(leaves)
        loss.backward()

        probes = [("ux", 10, 10, 1e-9), ("sxx", 5, 20, 1e-3),
                  ("sxy", 16, 7, 1e-3), ("uy", 25, 14, 1e-9)]
        for name, j, i, eps in probes:
            plus = {k: v.detach().clone() for k, v in leaves.items()}
            minus = {k: v.detach().clone() for k, v in leaves.items()}
            plus[name][j, i] += eps
            minus[name][j, i] -= eps
            fd = (float(loss_of(plus)) - float(loss_of(minus))) / (2 * eps)
            ad = float(leaves[name].grad[j, i])
            assert ad == pytest.approx(fd, rel=1e-4, abs=1e-12), (name, j, i)

    def test_gradient_zero_at_hole_interior(self, grid32, material, sample32):
        grid, classes = grid32
        scales = ResidualScales.for_material(material, 100.0, grid.h)
        tops = TorchOps(classes)
        T = torch.from_numpy(sample32.T.copy())
        ux = torch.from_numpy(sample32.ux.copy()).requires_grad_(True)
        others = [torch.from_numpy(getattr(sample32, n).copy())
                  for n in ("uy", "sxx", "syy", "sxy")]
        bundle = residual_fields(tops, material, ux, *others, T)
        scaled_loss(tops, bundle, scales).backward()
        inside = torch.from_numpy(classes.hole_interior.copy())
        assert (ux.grad[inside] == 0.0).all()


def test_float32_mode(grid32):
    grid, classes = grid32
    tops = TorchOps(classes, dtype=torch.float32)
    f = torch.randn(grid.ny, grid.nx, dtype=torch.float32)
    out = tops.dx(f)
    assert out.dtype == torch.float32
    assert torch.isfinite(out).all()
