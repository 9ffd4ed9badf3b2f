import numpy as np
import pytest

from sdfshape.bspline import (
    BSplineField,
    ControlGrid,
    bending_energy_of_rows,
    bspline_basis,
    bspline_basis_d1,
    bspline_basis_d2,
)
from sdfshape.errors import PreconditionError


def test_basis_partition_of_unity():
    t = np.linspace(0, 1, 50)
    assert np.allclose(bspline_basis(t).sum(axis=-1), 1.0, atol=1e-12)


def test_basis_derivatives_match_finite_differences():
    t = np.linspace(0.05, 0.95, 19)
    h = 1e-6
    d1_fd = (bspline_basis(t + h) - bspline_basis(t - h)) / (2 * h)
    assert np.allclose(bspline_basis_d1(t), d1_fd, atol=1e-8)
    d2_fd = (bspline_basis_d1(t + h) - bspline_basis_d1(t - h)) / (2 * h)
    assert np.allclose(bspline_basis_d2(t), d2_fd, atol=1e-8)


def test_zero_field_zero_displacement():
    fld = BSplineField.covering((0, 0, 0), (20, 20, 20), n_levels=3, finest_spacing=5.0)
    pts = np.random.default_rng(0).uniform(0, 20, size=(50, 3))
    assert np.allclose(fld.displacement(pts), 0.0)
    assert bending_energy_of_rows(fld.hessian_rows(pts)) == 0.0


def test_constant_field_translation():
    grid = ControlGrid.covering((0, 0, 0), (10, 10, 10), 4.0)
    grid.coeffs[...] = [1.0, -2.0, 0.5]
    pts = np.random.default_rng(1).uniform(0, 10, size=(40, 3))
    d = grid.displacement(pts)
    assert np.allclose(d, [1.0, -2.0, 0.5], atol=1e-12)


def test_affine_field_reproduced_and_bending_free():
    # cubic B-splines reproduce affine functions when coefficients are
    # sampled from the affine map at control-point positions
    grid = ControlGrid.covering((0, 0, 0), (12, 12, 12), 3.0)
    A = np.array([[0.02, 0.01, 0.0], [0.0, -0.03, 0.005], [0.01, 0.0, 0.015]])
    b = np.array([0.5, -0.25, 1.0])
    nx, ny, nz = grid.dims
    ii = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), axis=-1)
    positions = ii * grid.spacing + grid.origin
    grid.coeffs = positions @ A.T + b

    pts = np.random.default_rng(2).uniform(1, 11, size=(60, 3))
    expected = pts @ A.T + b
    assert np.allclose(grid.displacement(pts), expected, atol=1e-9)
    rows = grid.hessian_rows(pts)
    assert np.abs(rows).max() < 1e-10


def test_hessian_matches_finite_differences():
    grid = ControlGrid.covering((0, 0, 0), (12, 12, 12), 3.0)
    rng = np.random.default_rng(3)
    grid.coeffs = rng.normal(scale=1.0, size=grid.coeffs.shape)
    fld = BSplineField([grid])
    pts = rng.uniform(3, 9, size=(10, 3))
    rows = fld.hessian_rows(pts)
    h = 1e-4
    pairs = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]
    for n, p in enumerate(pts):
        for k, (a, b) in enumerate(pairs):
            ea = np.eye(3)[a] * h
            eb = np.eye(3)[b] * h
            fd = (
                fld.displacement(p + ea + eb)
                - fld.displacement(p + ea - eb)
                - fld.displacement(p - ea + eb)
                + fld.displacement(p - ea - eb)
            )[0] / (4 * h * h)
            assert np.allclose(rows[n, k], fd, rtol=1e-4, atol=1e-6)


def test_point_outside_support_raises():
    fld = BSplineField.covering((0, 0, 0), (10, 10, 10), n_levels=1, finest_spacing=5.0)
    with pytest.raises(PreconditionError):
        fld.displacement(np.array([[100.0, 0.0, 0.0]]))


def test_level_spacings_halve():
    fld = BSplineField.covering((0, 0, 0), (40, 40, 40), n_levels=5, finest_spacing=4.0)
    spacings = [lvl.spacing[0] for lvl in fld.levels]
    assert spacings == [64.0, 32.0, 16.0, 8.0, 4.0]
