import os

import numpy as np
import pytest

from sdfshape import chain_to_mesh, make_hourglass
from sdfshape.cli import main
from sdfshape.io import read_mesh, read_volume, write_mesh, write_volume

from conftest import icosphere


@pytest.fixture(scope="module")
def sphere_obj(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "sphere.obj"
    write_mesh(icosphere(radius=8.0, subdivisions=3), str(path))
    return str(path)


class TestSdfCommand:
    def test_mesh_to_volume_round_trip_bits(self, sphere_obj, tmp_path, capsys):
        out = str(tmp_path / "vol.mhd")
        assert main(["sdf", sphere_obj, out, "--spacing", "1.0"]) == 0
        grid = read_volume(out)
        assert grid.kind == "SDF"
        out2 = str(tmp_path / "vol2.mhd")
        write_volume(grid, out2)
        assert open(out.replace(".mhd", ".raw"), "rb").read() == open(
            out2.replace(".mhd", ".raw"), "rb"
        ).read()

    def test_missing_file_exit_2(self, tmp_path):
        assert main(["sdf", str(tmp_path / "nope.obj"), str(tmp_path / "v.mhd")]) == 2

    def test_open_mesh_exit_3(self, tmp_path):
        sphere = icosphere(radius=5.0, subdivisions=2)
        from sdfshape.mesh import TriMesh

        open_mesh = TriMesh(sphere.vertices, sphere.triangles[:-4])
        path = str(tmp_path / "open.obj")
        write_mesh(open_mesh, path)
        assert main(["sdf", path, str(tmp_path / "v.mhd")]) == 3


class TestMeshCommand:
    def test_volume_to_mesh(self, sphere_obj, tmp_path):
        vol = str(tmp_path / "v.mhd")
        assert main(["sdf", sphere_obj, vol, "--spacing", "0.8"]) == 0
        out = str(tmp_path / "m.obj")
        assert main(["mesh", vol, out, "--smooth-iters", "0"]) == 0
        mesh = read_mesh(out)
        assert mesh.is_closed()
        assert mesh.area() == pytest.approx(4 * np.pi * 64.0, rel=0.03)

    def test_level_out_of_range_exit_3(self, sphere_obj, tmp_path):
        vol = str(tmp_path / "v.mhd")
        main(["sdf", sphere_obj, vol, "--spacing", "1.0"])
        assert main(["mesh", vol, str(tmp_path / "m.obj"), "--level", "99"]) == 3

    def test_smoothing_shrinks(self, sphere_obj, tmp_path):
        vol = str(tmp_path / "v.mhd")
        main(["sdf", sphere_obj, vol, "--spacing", "0.8"])
        raw, smooth = str(tmp_path / "r.obj"), str(tmp_path / "s.obj")
        main(["mesh", vol, raw, "--smooth-iters", "0"])
        main(["mesh", vol, smooth, "--smooth-iters", "3", "--relaxation", "0.1"])
        assert abs(read_mesh(smooth).volume()) < abs(read_mesh(raw).volume())


class TestRegisterCommand:
    def test_identical_meshes(self, tmp_path, capsys):
        mesh = chain_to_mesh(make_hourglass(r_end=4.0, r_waist=2.0, half_length=12.0), 1.2)
        src = str(tmp_path / "s.obj")
        write_mesh(mesh, src)
        out = str(tmp_path / "out.obj")
        field_path = str(tmp_path / "f.bsf")
        config = str(tmp_path / "cfg.txt")
        with open(config, "w") as fh:
            fh.write("max_iters = 30\nsamples_per_iter = 512\nn_levels = 3\n")
        code = main(["register", src, src, out, "--out-field", field_path,
                     "--config", config, "--seed", "4"])
        assert code == 0
        rows = dict(
            line.split("\t") for line in capsys.readouterr().out.strip().splitlines()
        )
        assert float(rows["rms_fit"]) < 0.1
        registered = read_mesh(out)
        d = np.linalg.norm(registered.vertices - mesh.vertices, axis=1)
        assert d.max() < 0.3
        assert os.path.exists(field_path)

    def test_bad_field_path_exit_2(self, tmp_path):
        mesh = chain_to_mesh(make_hourglass(r_end=4.0, r_waist=2.0, half_length=12.0), 1.5)
        src = str(tmp_path / "s.obj")
        write_mesh(mesh, src)
        config = str(tmp_path / "cfg.txt")
        with open(config, "w") as fh:
            fh.write("max_iters = 2\nsamples_per_iter = 128\nn_levels = 2\n")
        code = main(["register", src, src, str(tmp_path / "o.obj"),
                     "--out-field", str(tmp_path / "no_dir" / "f.bsf"),
                     "--config", config])
        assert code == 2


class TestDecoupleCommand:
    def test_hourglass_cut(self, tmp_path, capsys):
        hg = make_hourglass()
        mesh = chain_to_mesh(hg, 0.8)
        src = str(tmp_path / "hg.obj")
        write_mesh(mesh, src)
        # neck ring: vertices near the waist plane x=0
        neck = np.flatnonzero(np.abs(mesh.vertices[:, 0]) < 1.5)
        neck_path = str(tmp_path / "neck.txt")
        np.savetxt(neck_path, neck, fmt="%d")
        tip = int(np.argmax(mesh.vertices[:, 0]))
        out = str(tmp_path / "laa.obj")
        code = main(["decouple", src, neck_path, out, "--tip-index", str(tip), "--seed", "0"])
        assert code == 0
        part = read_mesh(out)
        assert part.vertices[:, 0].max() == pytest.approx(mesh.vertices[:, 0].max(), abs=1e-6)
        assert part.n_triangles < mesh.n_triangles
        assert os.path.exists(out + ".cut.txt")
        lm_lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("landmark_")]
        assert len(lm_lines) == 5

    def test_deterministic(self, tmp_path):
        hg = make_hourglass()
        mesh = chain_to_mesh(hg, 1.0)
        src = str(tmp_path / "hg.obj")
        write_mesh(mesh, src)
        neck = np.flatnonzero(np.abs(mesh.vertices[:, 0]) < 1.5)
        neck_path = str(tmp_path / "neck.txt")
        np.savetxt(neck_path, neck, fmt="%d")
        tip = int(np.argmax(mesh.vertices[:, 0]))
        o1, o2 = str(tmp_path / "a.obj"), str(tmp_path / "b.obj")
        main(["decouple", src, neck_path, o1, "--tip-index", str(tip), "--seed", "7"])
        main(["decouple", src, neck_path, o2, "--tip-index", str(tip), "--seed", "7"])
        assert open(o1).read() == open(o2).read()

    def test_plane_misses_exit_3(self, tmp_path):
        sphere = icosphere(radius=5.0, subdivisions=2)
        src = str(tmp_path / "s.obj")
        write_mesh(sphere, src)
        # neck plane fitted far above the mesh: every candidate misses
        far = icosphere(radius=5.0, subdivisions=2)
        from sdfshape.mesh import TriMesh

        shifted = TriMesh(far.vertices + [0.0, 0.0, 50.0], far.triangles)
        neck_path = str(tmp_path / "neck.txt")
        pole = np.argsort(-shifted.vertices[:, 2])[:6]
        np.savetxt(neck_path, pole, fmt="%d")
        corr = str(tmp_path / "c.obj")
        write_mesh(shifted, corr)
        code = main(["decouple", src, neck_path, str(tmp_path / "o.obj"),
                     "--corresponded", corr, "--seed", "0"])
        assert code == 3


class TestSsmCommands:
    def make_population(self, tmp_path, n=8):
        rng = np.random.default_rng(0)
        base = icosphere(radius=10.0, subdivisions=2)
        paths = []
        mode = rng.normal(size=base.vertices.shape)
        mode /= np.linalg.norm(mode)
        for i in range(n):
            c = rng.normal(scale=2.0)
            mesh_i = base.vertices + c * mode
            p = str(tmp_path / f"shape{i}.obj")
            from sdfshape.mesh import TriMesh

            write_mesh(TriMesh(mesh_i, base.triangles), p)
            paths.append(p)
        return paths

    def test_build_synth_cluster(self, tmp_path, capsys):
        paths = self.make_population(tmp_path)
        model_dir = str(tmp_path / "model")
        scree = str(tmp_path / "scree.png")
        code = main(["ssm", "build", "--meshes", *paths, "--out", model_dir,
                     "--modes", "3", "--plot", scree])
        assert code == 0
        out = capsys.readouterr().out
        assert out.startswith("mode\tfraction\tcumulative")
        first = float(out.splitlines()[1].split("\t")[1])
        assert first > 0.9  # single-mode population
        assert os.path.exists(scree)

        mean_mesh = str(tmp_path / "mean.obj")
        assert main(["ssm", "synth", "--model", model_dir, "--out", mean_mesh]) == 0
        from sdfshape.io import read_ssm

        model = read_ssm(model_dir)
        mesh = read_mesh(mean_mesh)
        assert np.allclose(mesh.vertices.reshape(-1), model.mean, atol=1e-6)

        llh_plot = str(tmp_path / "llh.png")
        code = main(["ssm", "cluster", "--model", model_dir, "--meshes", *paths,
                     "--k-max", "2", "--restarts", "2", "--seed", "1",
                     "--plot", llh_plot])
        assert code == 0
        out = capsys.readouterr().out
        assert "k_star\t" in out
        assert os.path.exists(llh_plot)


class TestMetricsCommand:
    def test_identical_inputs(self, sphere_obj, tmp_path, capsys):
        plot = str(tmp_path / "metrics.png")
        code = main(["metrics", sphere_obj, sphere_obj, "--samples", "2000",
                     "--seed", "0", "--plot", plot])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        header = lines[0].split("\t")
        assert header[1:] == ["Dice", "contour Dice", "Chamfer distance", "EM distance",
                              "Mesh Accuracy", "Mesh Completion", "Cosine Similarity"]
        row = lines[1].split("\t")
        values = dict(zip(header[1:], (float(v) for v in row[1:])))
        assert np.isnan(values["Dice"])  # no labels given
        assert values["Chamfer distance"] < 1e-6
        assert values["Mesh Completion"] == 1.0
        assert values["Cosine Similarity"] == pytest.approx(1.0, abs=1e-9)
        assert os.path.exists(plot)

    def test_with_labels(self, sphere_obj, tmp_path, capsys):
        vol = str(tmp_path / "v.mhd")
        main(["sdf", sphere_obj, vol, "--spacing", "1.0"])
        lab = str(tmp_path / "l.mhd")
        main(["labelmap", vol, lab, "--dims", "30,30,30", "--spacing", "1.0"])
        code = main(["metrics", sphere_obj, sphere_obj, "--pred-label", lab,
                     "--truth-label", lab, "--samples", "1000", "--seed", "0"])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        values = lines[1].split("\t")
        assert float(values[1]) == 1.0  # dice
        assert float(values[2]) == 1.0  # contour dice

    def test_mismatched_grids_exit_3(self, sphere_obj, tmp_path):
        vol = str(tmp_path / "v.mhd")
        main(["sdf", sphere_obj, vol, "--spacing", "1.0"])
        lab1 = str(tmp_path / "l1.mhd")
        lab2 = str(tmp_path / "l2.mhd")
        main(["labelmap", vol, lab1, "--dims", "30,30,30", "--spacing", "1.0"])
        main(["labelmap", vol, lab2, "--dims", "20,20,20", "--spacing", "1.5"])
        code = main(["metrics", sphere_obj, sphere_obj, "--pred-label", lab1,
                     "--truth-label", lab2, "--samples", "500"])
        assert code == 3


class TestPhantomCommand:
    def test_population_written(self, tmp_path):
        out = str(tmp_path / "pop")
        assert main(["phantom", out, "--count", "4", "--spacing", "2.0", "--seed", "5"]) == 0
        manifest = open(os.path.join(out, "manifest.tsv")).read().strip().splitlines()
        assert manifest[0].startswith("index\tfile\tlabel")
        assert len(manifest) == 5
        for line in manifest[1:]:
            name = line.split("\t")[1]
            assert os.path.exists(os.path.join(out, name))

    def test_seed_deterministic(self, tmp_path):
        o1, o2 = str(tmp_path / "p1"), str(tmp_path / "p2")
        main(["phantom", o1, "--count", "3", "--spacing", "2.0", "--seed", "9"])
        main(["phantom", o2, "--count", "3", "--spacing", "2.0", "--seed", "9"])
        assert open(os.path.join(o1, "manifest.tsv")).read() == open(
            os.path.join(o2, "manifest.tsv")
        ).read()
        assert open(os.path.join(o1, "phantom_000.obj")).read() == open(
            os.path.join(o2, "phantom_000.obj")
        ).read()


class TestHelp:
    @pytest.mark.parametrize(
        "cmd", ["sdf", "mesh", "labelmap", "register", "decouple", "ssm", "metrics", "phantom"]
    )
    def test_help_lists_defaults(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "usage" in out
