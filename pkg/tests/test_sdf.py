import numpy as np
import pytest

from sdfshape import (
    CapsuleChain,
    PreconditionError,
    TriMesh,
    analytic_sdf,
    chain_to_mesh,
    mesh_to_sdf,
)
from sdfshape.surfquery import SurfaceLocator

from conftest import gentle_chain, icosphere


def grid_geometry(mesh, spacing, pad=6.0):
    lo = mesh.vertices.min(axis=0) - pad
    hi = mesh.vertices.max(axis=0) + pad
    dims = np.ceil((hi - lo) / spacing).astype(int) + 1
    return dims, (spacing,) * 3, lo


class TestSphere:
    def test_center_value(self):
        mesh = icosphere(radius=3.0, subdivisions=4)
        dims, spacing, origin = grid_geometry(mesh, 1.0, pad=4.0)
        # align a voxel center exactly onto the sphere center
        origin = origin + (np.zeros(3) - origin) % 1.0
        g = mesh_to_sdf(mesh, dims, spacing, origin)
        idx = np.round(g.world_to_index(np.zeros(3))).astype(int)
        assert np.allclose(g.index_to_world(idx), 0.0)
        # icosphere vertices lie on the sphere; center sees inscribed distance
        assert g.values[tuple(idx)] == pytest.approx(-3.0, abs=0.02)

    def test_truncation(self):
        mesh = icosphere(radius=3.0, subdivisions=3)
        dims, spacing, origin = grid_geometry(mesh, 1.0, pad=13.0)
        g = mesh_to_sdf(mesh, dims, spacing, origin, trunc=5.0)
        d_centers = np.linalg.norm(g.voxel_centers(), axis=1).reshape(g.dims)
        far_out = d_centers > 3.0 + 12.0
        assert np.allclose(g.values[far_out.reshape(g.dims)], 5.0)
        assert g.values.max() == 5.0
        assert g.values.min() >= -5.0

    def test_value_on_surface_is_zero(self):
        mesh = icosphere(radius=4.0, subdivisions=3)
        loc = SurfaceLocator(mesh)
        v = mesh.vertices[17]
        assert abs(loc.signed_distance(v[None])[0]) < 1e-12


class TestChainOracle:
    def test_matches_analytic_everywhere(self):
        rng = np.random.default_rng(123)
        chain = gentle_chain(rng, n_joints=4)
        mesh = chain_to_mesh(chain, spacing=0.35)
        spacing = 1.4
        dims, sp, origin = grid_geometry(mesh, spacing)
        g = mesh_to_sdf(mesh, dims, sp, origin, trunc=5.0)
        exact = np.clip(analytic_sdf(chain, g.voxel_centers()), -5.0, 5.0)
        err = np.abs(g.values.ravel(order="C") - exact)
        assert err.max() < 0.02 * spacing

    def test_no_sign_errors_off_surface(self):
        rng = np.random.default_rng(54)
        chain = gentle_chain(rng, n_joints=3)
        mesh = chain_to_mesh(chain, spacing=0.35)
        dims, sp, origin = grid_geometry(mesh, 1.2)
        g = mesh_to_sdf(mesh, dims, sp, origin)
        exact = analytic_sdf(chain, g.voxel_centers())
        off_surface = np.abs(exact) > 0.1
        signs_match = np.sign(g.values.ravel(order="C")[off_surface]) == np.sign(exact[off_surface])
        assert signs_match.all()

    def test_gradient_magnitude_at_most_one(self):
        rng = np.random.default_rng(9)
        chain = gentle_chain(rng, n_joints=3)
        mesh = chain_to_mesh(chain, spacing=0.5)
        spacing = 1.0
        dims, sp, origin = grid_geometry(mesh, spacing)
        g = mesh_to_sdf(mesh, dims, sp, origin)
        v = g.values
        grad = np.stack(
            [
                (v[2:, 1:-1, 1:-1] - v[:-2, 1:-1, 1:-1]) / (2 * spacing),
                (v[1:-1, 2:, 1:-1] - v[1:-1, :-2, 1:-1]) / (2 * spacing),
                (v[1:-1, 1:-1, 2:] - v[1:-1, 1:-1, :-2]) / (2 * spacing),
            ]
        )
        mag = np.linalg.norm(grad, axis=0)
        interior = np.abs(v[1:-1, 1:-1, 1:-1]) < 5.0 - spacing  # untruncated
        assert mag[interior].max() <= 1.0 + 0.05


class TestErrors:
    def test_open_surface_raises(self):
        mesh = icosphere(radius=5.0, subdivisions=2)
        open_mesh = TriMesh(mesh.vertices, mesh.triangles[:-3])
        with pytest.raises(PreconditionError, match="open surface"):
            mesh_to_sdf(open_mesh, (20, 20, 20), (1, 1, 1), (-10, -10, -10))

    def test_grid_not_covering_raises(self):
        mesh = icosphere(radius=5.0, subdivisions=2)
        with pytest.raises(PreconditionError, match="cover"):
            mesh_to_sdf(mesh, (6, 6, 6), (1, 1, 1), (-2, -2, -2))

    def test_spacing_at_truncation_raises(self):
        mesh = icosphere(radius=5.0, subdivisions=2)
        with pytest.raises(PreconditionError):
            mesh_to_sdf(mesh, (6, 6, 6), (6, 6, 6), (-15, -15, -15), trunc=5.0)
