"""Command-line pipeline driver.

Subcommands mirror the processing stages: sdf, mesh, register, decouple,
ssm (build/synth/cluster), metrics, phantom. Machine-readable results go to
stdout or files; logging and stage timings go to stderr. Exit codes: 0
success, 2 I/O error, 3 precondition violation, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time

import numpy as np

from . import __version__
from .decoupling import derive_landmarks
from .errors import NumericalError, PreconditionError
from .gmm import fit_gmm, select_clusters_cv
from .grid import DEFAULT_TRUNCATION_MM, VoxelGrid, threshold_to_labelmap
from .isosurface import laplacian_smooth, largest_surface_component, marching_cubes
from .metrics import MetricReport, evaluate_meshes
from .pipeline import PipelineConfig, decouple_with_neck, gmm_assign, seed_for
from .phantom import PopulationSpec, sample_population
from .registration import RegistrationConfig, register_surfaces
from .sdf import mesh_to_sdf
from .ssm import as_shape_vector, build_ssm, explained_variance, procrustes_align, project, shape_to_mesh, synthesize
from . import io as shio

log = logging.getLogger("sdfshape")

EXIT_OK = 0
EXIT_IO = 2
EXIT_PRECONDITION = 3
EXIT_NUMERICAL = 4


def load_config(path: str | None, seed: int | None) -> PipelineConfig:
    """Flat key=value config file; unknown keys rejected, flags win."""
    reg_fields = {f: None for f in RegistrationConfig.__dataclass_fields__}
    values = {}
    if path:
        with open(path) as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise PreconditionError(f"bad config line: {line!r}")
                key, val = (s.strip() for s in line.split("=", 1))
                values[key] = val
    reg_kwargs = {}
    pipe_kwargs = {}
    for key, val in values.items():
        if key in reg_fields:
            typ = RegistrationConfig.__dataclass_fields__[key].type
            reg_kwargs[key] = int(val) if "int" in str(typ) else float(val)
        elif key in ("seed", "template_iterations", "template_subset", "n_modes",
                     "k_max", "gmm_restarts", "cv_restarts", "cut_trials"):
            pipe_kwargs[key] = int(val)
        elif key in ("trunc", "rms_threshold", "cut_angle_sigma_deg",
                     "cut_shift_sigma_mm", "neck_band_mm"):
            pipe_kwargs[key] = float(val)
        else:
            raise PreconditionError(f"unknown config key: {key}")
    if seed is not None:
        pipe_kwargs["seed"] = seed
    if "seed" in pipe_kwargs and "seed" not in reg_kwargs:
        reg_kwargs["seed"] = seed_for(pipe_kwargs["seed"], "register")
    config = PipelineConfig(registration=RegistrationConfig(**reg_kwargs), **pipe_kwargs)
    return config


def cmd_sdf(args) -> int:
    mesh = shio.read_mesh(args.mesh)
    if args.dims:
        dims = tuple(int(d) for d in args.dims.split(","))
        lo = mesh.vertices.min(axis=0) - args.pad
        spacing = ((mesh.vertices.max(axis=0) + args.pad - lo) / np.array(dims))
    else:
        spacing = np.full(3, args.spacing)
        lo = mesh.vertices.min(axis=0) - args.pad
        dims = tuple(np.ceil((mesh.vertices.max(axis=0) + args.pad - lo) / spacing).astype(int) + 1)
    grid = mesh_to_sdf(mesh, dims, spacing, lo, trunc=args.trunc)
    shio.write_volume(grid, args.out)
    log.info("wrote %s (%dx%dx%d)", args.out, *grid.dims)
    return EXIT_OK


def cmd_mesh(args) -> int:
    grid = shio.read_volume(args.volume)
    mesh = marching_cubes(grid, args.level)
    if args.largest_component:
        mesh = largest_surface_component(mesh)
    mesh = laplacian_smooth(mesh, args.smooth_iters, args.relaxation)
    shio.write_mesh(mesh, args.out)
    log.info("wrote %s (%d vertices, %d triangles)", args.out, mesh.n_vertices, mesh.n_triangles)
    return EXIT_OK


def cmd_labelmap(args) -> int:
    grid = shio.read_volume(args.volume)
    dims = tuple(int(d) for d in args.dims.split(","))
    lab = threshold_to_labelmap(grid, dims, np.full(3, args.spacing))
    shio.write_volume(lab, args.out)
    return EXIT_OK


def cmd_register(args) -> int:
    source = shio.read_mesh(args.source)
    target = shio.read_mesh(args.target)
    config = load_config(args.config, args.seed).registration
    result = register_surfaces(source, target, config)
    shio.write_mesh(result.corresponded, args.out)
    if args.out_field:
        shio.write_field(result.field, args.out_field)
    print(f"rms_fit\t{result.rms_fit:.6f}")
    print(f"rms_coverage\t{result.rms_coverage:.6f}")
    return EXIT_OK


def cmd_decouple(args) -> int:
    mesh = shio.read_mesh(args.mesh)
    corresponded = shio.read_mesh(args.corresponded) if args.corresponded else mesh
    neck_idx = np.loadtxt(args.neck_indices, dtype=int).reshape(-1)
    if args.tip_index is not None:
        tip = corresponded.vertices[args.tip_index]
    else:
        neck_c = corresponded.vertices[neck_idx].mean(axis=0)
        far = np.argmax(np.linalg.norm(corresponded.vertices - neck_c, axis=1))
        tip = corresponded.vertices[far]
    config = load_config(args.config, args.seed)
    dec = decouple_with_neck(
        mesh, corresponded.vertices[neck_idx], tip, config,
        seed_for(config.seed, "cut"),
    )
    shio.write_decoupled(dec, args.out)
    lms = derive_landmarks(dec)
    for name, p in zip(lms.labels, lms.points):
        print(f"landmark_{name}\t{p[0]:.6f}\t{p[1]:.6f}\t{p[2]:.6f}")
    return EXIT_OK


def cmd_ssm(args) -> int:
    if args.action == "build":
        meshes = [shio.read_mesh(p) for p in args.meshes]
        if len({m.n_vertices for m in meshes}) != 1:
            raise PreconditionError("corresponded meshes must share the vertex count")
        vectors = [as_shape_vector(m) for m in meshes]
        aligned, _ = procrustes_align(vectors)
        t = min(args.modes, len(aligned) - 1)
        model = build_ssm(aligned, t=t, connectivity=meshes[0].triangles)
        shio.write_ssm(model, args.out)
        frac = explained_variance(model)
        print("mode\tfraction\tcumulative")
        for i, f in enumerate(frac):
            print(f"{i + 1}\t{f:.6f}\t{frac[: i + 1].sum():.6f}")
        if args.plot:
            from .plots import save_scree_plot

            save_scree_plot(frac, args.plot)
            log.info("wrote %s", args.plot)
        return EXIT_OK

    if args.action == "synth":
        model = shio.read_ssm(args.model)
        b = np.zeros(model.n_modes)
        for i, val in enumerate(args.coeff or []):
            if i < model.n_modes:
                b[i] = val
        if args.sigma_units:
            b = b * np.sqrt(np.maximum(model.eigenvalues, 0.0))
        shio.write_mesh(shape_to_mesh(synthesize(model, b), model.connectivity), args.out)
        return EXIT_OK

    if args.action == "cluster":
        model = shio.read_ssm(args.model)
        meshes = [shio.read_mesh(p) for p in args.meshes]
        vectors = [as_shape_vector(m) for m in meshes]
        aligned, _ = procrustes_align(vectors)
        data = np.array([project(model, v) for v in aligned])
        seed = args.seed if args.seed is not None else 0
        k_star, llh = select_clusters_cv(data, args.k_max, seed=seed_for(seed, "cv"),
                                         restarts=args.restarts)
        gmm = fit_gmm(data, k_star, seed=seed_for(seed, "gmm"), restarts=args.restarts)
        assignments = gmm_assign(gmm, data)
        if args.out:
            shio.write_gmm(gmm, args.out)
        print("k\tmean_test_llh")
        for k, v in enumerate(llh, start=1):
            print(f"{k}\t{v:.6f}")
        print(f"k_star\t{k_star}")
        print("assignments\t" + " ".join(str(a) for a in assignments))
        if args.plot:
            from .plots import save_llh_curve

            save_llh_curve(llh, k_star, args.plot)
            log.info("wrote %s", args.plot)
        return EXIT_OK
    raise PreconditionError(f"unknown ssm action {args.action!r}")


METRIC_COLUMNS = ("Dice", "contour Dice", "Chamfer distance", "EM distance",
                  "Mesh Accuracy", "Mesh Completion", "Cosine Similarity")


def cmd_metrics(args) -> int:
    pred = shio.read_mesh(args.pred)
    truth = shio.read_mesh(args.truth)
    pred_label = shio.read_volume(args.pred_label) if args.pred_label else None
    truth_label = shio.read_volume(args.truth_label) if args.truth_label else None
    report = evaluate_meshes(
        pred, truth, pred_label, truth_label,
        band_mm=args.band, completion_tol_mm=args.completion_tol,
        quantile=args.quantile, n_samples=args.samples, seed=args.seed or 0,
    )
    print("case\t" + "\t".join(METRIC_COLUMNS))
    row = report.as_row()
    print(args.name + "\t" + "\t".join(f"{v:.6f}" for v in row))
    print("mean\t" + "\t".join(f"{v:.6f}" for v in row))
    if args.plot:
        from .plots import save_metric_bars

        save_metric_bars(
            [dict(zip(("case", *MetricReport.FIELDS), [args.name, *row]))], args.plot
        )
        log.info("wrote %s", args.plot)
    return EXIT_OK


def cmd_phantom(args) -> int:
    import os

    spec = PopulationSpec(n_shapes=args.count, seed=args.seed if args.seed is not None else 0)
    population = sample_population(spec, mesh_spacing=args.spacing)
    os.makedirs(args.out_dir, exist_ok=True)
    manifest = os.path.join(args.out_dir, "manifest.tsv")
    with open(manifest, "w") as fh:
        fh.write("index\tfile\tlabel\tbend_angle\tscale\thas_lobe\n")
        for i, (mesh, label, params) in enumerate(population):
            name = f"phantom_{i:03d}.obj"
            shio.write_mesh(mesh, os.path.join(args.out_dir, name))
            fh.write(
                f"{i}\t{name}\t{label}\t{params['bend_angle']:.6f}\t"
                f"{params['scale']:.6f}\t{int(params['has_lobe'])}\n"
            )
    log.info("wrote %d phantoms to %s", len(population), args.out_dir)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdfshape",
        description="SDF-based shape processing: conversion, registration, "
                    "decoupling and statistical shape modelling.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", action="store_true", help="debug logging to stderr")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS worker threads (best effort)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sdf", help="convert a closed mesh to a truncated SDF volume")
    p.add_argument("mesh")
    p.add_argument("out", help="output volume header (.mhd)")
    p.add_argument("--dims", default=None, help="nx,ny,nz (overrides --spacing)")
    p.add_argument("--spacing", type=float, default=1.5, help="voxel size in mm")
    p.add_argument("--pad", type=float, default=6.0, help="margin around the mesh, mm")
    p.add_argument("--trunc", type=float, default=DEFAULT_TRUNCATION_MM)
    p.set_defaults(func=cmd_sdf)

    p = sub.add_parser("mesh", help="extract an isosurface mesh from a volume")
    p.add_argument("volume")
    p.add_argument("out", help="output mesh (.obj or .ply)")
    p.add_argument("--level", type=float, default=0.0)
    p.add_argument("--smooth-iters", type=int, default=3)
    p.add_argument("--relaxation", type=float, default=0.1)
    p.add_argument("--largest-component", action="store_true")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("labelmap", help="threshold an SDF volume to a labelmap")
    p.add_argument("volume")
    p.add_argument("out")
    p.add_argument("--dims", required=True, help="nx,ny,nz")
    p.add_argument("--spacing", type=float, required=True)
    p.set_defaults(func=cmd_labelmap)

    p = sub.add_parser("register", help="register a source mesh onto a target")
    p.add_argument("source")
    p.add_argument("target")
    p.add_argument("out", help="corresponded source mesh")
    p.add_argument("--out-field", default=None, help="write the B-spline field")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("decouple", help="cut the appendage by the optimal neck plane")
    p.add_argument("mesh")
    p.add_argument("neck_indices", help="text file of template neck vertex indices")
    p.add_argument("out", help="output appendage mesh (sidecar .cut.txt added)")
    p.add_argument("--corresponded", default=None,
                   help="corresponded template mesh carrying the neck indices "
                        "(defaults to the input mesh)")
    p.add_argument("--tip-index", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_decouple)

    p = sub.add_parser("ssm", help="build/sample/cluster a statistical shape model")
    p.add_argument("action", choices=("build", "synth", "cluster"))
    p.add_argument("--meshes", nargs="*", default=[], help="corresponded meshes")
    p.add_argument("--model", default=None, help="model directory (synth/cluster)")
    p.add_argument("--out", default=None, help="output model directory or mesh")
    p.add_argument("--modes", type=int, default=5)
    p.add_argument("--coeff", type=float, nargs="*", default=None)
    p.add_argument("--sigma-units", action="store_true",
                   help="interpret coefficients as standard deviations per mode")
    p.add_argument("--k-max", type=int, default=5)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--plot", default=None, help="figure path (scree or LLH curve)")
    p.set_defaults(func=cmd_ssm)

    p = sub.add_parser("metrics", help="evaluate a predicted mesh against the truth")
    p.add_argument("pred")
    p.add_argument("truth")
    p.add_argument("--pred-label", default=None)
    p.add_argument("--truth-label", default=None)
    p.add_argument("--name", default="case")
    p.add_argument("--band", type=float, default=3.0, help="contour dice band, mm")
    p.add_argument("--completion-tol", type=float, default=1.0)
    p.add_argument("--quantile", type=float, default=0.9)
    p.add_argument("--samples", type=int, default=30000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--plot", default=None, help="metric bar figure path")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("phantom", help="generate a synthetic phantom population")
    p.add_argument("out_dir")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--spacing", type=float, default=1.5)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_phantom)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.threads is not None:
        _cap_threads(args.threads)
    start = time.perf_counter()
    try:
        code = args.func(args)
    except (FileNotFoundError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except PreconditionError as exc:
        log.error("%s", exc)
        return EXIT_PRECONDITION
    except NumericalError as exc:
        log.error("%s", exc)
        return EXIT_NUMERICAL
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - start)
    return code


def _cap_threads(n: int) -> None:
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:
        log.debug("threadpoolctl not installed; --threads ignored")


if __name__ == "__main__":
    sys.exit(main())
