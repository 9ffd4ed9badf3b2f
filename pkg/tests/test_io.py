import numpy as np
import pytest

from sdfshape import TriMesh, VoxelGrid, make_hourglass, chain_to_mesh
from sdfshape.bspline import BSplineField
from sdfshape.decoupling import Plane, cut_mesh
from sdfshape.gmm import GmmModel
from sdfshape.io import (
    read_decoupled,
    read_field,
    read_gmm,
    read_mesh,
    read_ssm,
    read_volume,
    write_decoupled,
    write_field,
    write_gmm,
    write_mesh,
    write_ssm,
    write_volume,
)
from sdfshape.ssm import build_ssm

from conftest import icosphere


class TestVolumeIO:
    def test_round_trip_sdf(self, tmp_path):
        rng = np.random.default_rng(0)
        g = VoxelGrid(rng.normal(size=(5, 6, 7)).astype(np.float32), (0.5, 1.0, 2.0), (-1, 2, 3))
        path = str(tmp_path / "vol.mhd")
        write_volume(g, path)
        back = read_volume(path)
        assert back.dims == g.dims
        assert np.allclose(back.spacing, g.spacing)
        assert np.allclose(back.origin, g.origin)
        assert back.kind == "SDF"
        assert np.array_equal(back.values, g.values.astype(np.float32).astype(np.float64))

    def test_round_trip_label(self, tmp_path):
        vals = (np.arange(24).reshape(2, 3, 4) % 2).astype(np.uint8)
        g = VoxelGrid(vals, (1, 1, 1), (0, 0, 0), kind="LABEL")
        path = str(tmp_path / "lab.mhd")
        write_volume(g, path)
        back = read_volume(path)
        assert back.kind == "LABEL"
        assert np.array_equal(back.values, vals)

    def test_write_is_bit_stable(self, tmp_path):
        rng = np.random.default_rng(1)
        g = VoxelGrid(rng.normal(size=(4, 4, 4)), (1, 1, 1), (0, 0, 0))
        p1, p2 = str(tmp_path / "a.mhd"), str(tmp_path / "b.mhd")
        write_volume(g, p1)
        write_volume(read_volume(p1), p2)
        assert open(p1.replace(".mhd", ".raw"), "rb").read() == open(
            p2.replace(".mhd", ".raw"), "rb"
        ).read()

    def test_x_fastest_ordering(self, tmp_path):
        vals = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        g = VoxelGrid(vals, (1, 1, 1), (0, 0, 0))
        path = str(tmp_path / "o.mhd")
        write_volume(g, path)
        raw = np.fromfile(str(tmp_path / "o.raw"), dtype="<f4")
        # first two entries differ along x (first index)
        assert raw[0] == vals[0, 0, 0]
        assert raw[1] == vals[1, 0, 0]


class TestMeshIO:
    def test_obj_round_trip(self, tmp_path, sphere_mesh):
        path = str(tmp_path / "m.obj")
        write_mesh(sphere_mesh, path)
        back = read_mesh(path)
        assert np.allclose(back.vertices, sphere_mesh.vertices)
        assert np.array_equal(back.triangles, sphere_mesh.triangles)

    def test_obj_one_based(self, tmp_path):
        mesh = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        path = str(tmp_path / "t.obj")
        write_mesh(mesh, path)
        text = open(path).read()
        assert "f 1 2 3" in text

    def test_ply_round_trip(self, tmp_path, sphere_mesh):
        path = str(tmp_path / "m.ply")
        write_mesh(sphere_mesh, path)
        back = read_mesh(path)
        assert np.allclose(back.vertices, sphere_mesh.vertices, atol=1e-5)
        assert np.array_equal(back.triangles, sphere_mesh.triangles)


class TestFieldIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        fld = BSplineField.covering((0, 0, 0), (30, 20, 20), n_levels=3, finest_spacing=5.0)
        for lvl in fld.levels:
            lvl.coeffs = rng.normal(size=lvl.coeffs.shape)
        path = str(tmp_path / "field.bsf")
        write_field(fld, path)
        back = read_field(path)
        pts = rng.uniform(2, 18, size=(40, 3))
        assert np.array_equal(back.displacement(pts), fld.displacement(pts))


class TestDecoupledIO:
    def test_round_trip(self, tmp_path):
        mesh = chain_to_mesh(make_hourglass(), 1.0)
        dec = cut_mesh(mesh, Plane((1.0, 0.0, 0.0), (0.0, 0.0, 0.0)))
        path = str(tmp_path / "laa.obj")
        write_decoupled(dec, path)
        back = read_decoupled(path)
        assert np.allclose(back.mesh.vertices, dec.mesh.vertices)
        assert np.array_equal(back.edge_loop, dec.edge_loop)
        assert np.allclose(back.cut_plane.normal, dec.cut_plane.normal)
        assert back.clean_cut == dec.clean_cut


class TestModelIO:
    def test_ssm_round_trip(self, tmp_path, sphere_mesh):
        rng = np.random.default_rng(3)
        base = sphere_mesh.vertices.reshape(-1)
        shapes = [base + rng.normal(scale=0.1, size=base.shape) for _ in range(6)]
        model = build_ssm(shapes, t=3, connectivity=sphere_mesh.triangles)
        d = str(tmp_path / "ssm")
        write_ssm(model, d)
        back = read_ssm(d)
        assert np.allclose(back.mean, model.mean)
        assert np.allclose(back.loadings, model.loadings)
        assert np.allclose(back.eigenvalues, model.eigenvalues)
        assert np.allclose(back.spectrum, model.spectrum)
        assert np.array_equal(back.connectivity, model.connectivity)
        assert back.n_train == model.n_train

    def test_gmm_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(3, 3))
        model = GmmModel(
            [0.25, 0.75],
            rng.normal(size=(2, 3)),
            np.stack([a @ a.T + np.eye(3), np.eye(3)]),
        )
        d = str(tmp_path / "gmm")
        write_gmm(model, d)
        back = read_gmm(d)
        assert np.allclose(back.weights, model.weights)
        assert np.allclose(back.means, model.means)
        assert np.allclose(back.covariances, model.covariances)
