"""File formats: volumes, meshes, deformation fields, shape and mixture models.

Volumes are MetaImage-style pairs: an ASCII header next to a raw
little-endian data file, x-fastest ordering. Meshes are ASCII OBJ (v/f,
1-based) or binary little-endian PLY (float32 positions, int32 indices).
Deformation fields and models use small text manifests plus raw float64
little-endian arrays.
"""
from __future__ import annotations

import os

import numpy as np

from .bspline import BSplineField, ControlGrid
from .decoupling import DecoupledAppendage, Plane
from .errors import PreconditionError
from .gmm import GmmModel
from .grid import VoxelGrid
from .mesh import TriMesh
from .ssm import SsmModel

_ELEMENT_TYPES = {"SDF": "MET_FLOAT", "PROB": "MET_FLOAT", "LABEL": "MET_UCHAR"}
_DTYPES = {"MET_FLOAT": np.dtype("<f4"), "MET_UCHAR": np.dtype("u1")}


# -- volumes ---------------------------------------------------------------------


def write_volume(grid: VoxelGrid, header_path: str) -> None:
    """Write a header/raw pair; the raw file sits next to the header."""
    raw_name = os.path.splitext(os.path.basename(header_path))[0] + ".raw"
    element = _ELEMENT_TYPES[grid.kind]
    nx, ny, nz = grid.dims
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        f"DimSize = {nx} {ny} {nz}",
        f"ElementSpacing = {grid.spacing[0]:.17g} {grid.spacing[1]:.17g} {grid.spacing[2]:.17g}",
        f"Offset = {grid.origin[0]:.17g} {grid.origin[1]:.17g} {grid.origin[2]:.17g}",
        f"ElementType = {element}",
        "ElementByteOrderMSB = False",
        f"GridKind = {grid.kind}",
        f"ElementDataFile = {raw_name}",
    ]
    with open(header_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    data = np.asfortranarray(grid.values.astype(_DTYPES[element]))  # x fastest
    with open(os.path.join(os.path.dirname(header_path) or ".", raw_name), "wb") as fh:
        fh.write(data.tobytes(order="F"))


def read_volume(header_path: str) -> VoxelGrid:
    fields = {}
    with open(header_path) as fh:
        for line in fh:
            if "=" in line:
                key, val = line.split("=", 1)
                fields[key.strip()] = val.strip()
    try:
        dims = tuple(int(v) for v in fields["DimSize"].split())
        spacing = [float(v) for v in fields["ElementSpacing"].split()]
        origin = [float(v) for v in fields["Offset"].split()]
        element = fields["ElementType"]
        data_file = fields["ElementDataFile"]
    except KeyError as exc:
        raise PreconditionError(f"volume header missing field: {exc}") from exc
    if fields.get("ElementByteOrderMSB", "False") != "False":
        raise PreconditionError("only little-endian volumes supported")
    kind = fields.get("GridKind", "LABEL" if element == "MET_UCHAR" else "SDF")
    raw_path = os.path.join(os.path.dirname(header_path) or ".", data_file)
    data = np.fromfile(raw_path, dtype=_DTYPES[element])
    if data.size != np.prod(dims):
        raise PreconditionError("volume data size does not match header dims")
    values = data.reshape(dims, order="F")
    return VoxelGrid(values, spacing, origin, kind=kind)


# -- meshes ----------------------------------------------------------------------


def write_mesh(mesh: TriMesh, path: str) -> None:
    if path.endswith(".ply"):
        _write_ply(mesh, path)
    else:
        _write_obj(mesh, path)


def read_mesh(path: str) -> TriMesh:
    if path.endswith(".ply"):
        return _read_ply(path)
    return _read_obj(path)


def _write_obj(mesh: TriMesh, path: str) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def _read_obj(path: str) -> TriMesh:
    verts = []
    tris = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                ids = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for k in range(1, len(ids) - 1):  # fan-triangulate polygons
                    tris.append([ids[0], ids[k], ids[k + 1]])
    return TriMesh(np.array(verts), np.array(tris, dtype=np.int64))


def _write_ply(mesh: TriMesh, path: str) -> None:
    header = "\n".join(
        [
            "ply",
            "format binary_little_endian 1.0",
            f"element vertex {mesh.n_vertices}",
            "property float x",
            "property float y",
            "property float z",
            f"element face {mesh.n_triangles}",
            "property list uchar int vertex_indices",
            "end_header",
        ]
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(mesh.vertices.astype("<f4").tobytes())
        counts = np.full((mesh.n_triangles, 1), 3, dtype="u1")
        faces = mesh.triangles.astype("<i4")
        body = b"".join(
            counts[i].tobytes() + faces[i].tobytes() for i in range(mesh.n_triangles)
        )
        fh.write(body)


def _read_ply(path: str) -> TriMesh:
    with open(path, "rb") as fh:
        n_vertex = n_face = 0
        while True:
            line = fh.readline().decode("ascii").strip()
            if line.startswith("element vertex"):
                n_vertex = int(line.split()[-1])
            elif line.startswith("element face"):
                n_face = int(line.split()[-1])
            elif line.startswith("format") and "binary_little_endian" not in line:
                raise PreconditionError("only binary little-endian PLY supported")
            elif line == "end_header":
                break
        verts = np.frombuffer(fh.read(12 * n_vertex), dtype="<f4").reshape(-1, 3)
        tris = np.empty((n_face, 3), dtype=np.int64)
        for i in range(n_face):
            count = np.frombuffer(fh.read(1), dtype="u1")[0]
            ids = np.frombuffer(fh.read(4 * count), dtype="<i4")
            tris[i] = ids[:3]
    return TriMesh(verts.astype(np.float64), tris)


# -- deformation fields ------------------------------------------------------------


def write_field(field: BSplineField, path: str) -> None:
    """Single file: text header (level geometry), then float64 coefficients."""
    header = [f"bsplinefield 1", f"levels {len(field.levels)}"]
    for i, lvl in enumerate(field.levels):
        nx, ny, nz = lvl.dims
        header.append(
            f"level {i} dims {nx} {ny} {nz} "
            f"spacing {lvl.spacing[0]:.17g} {lvl.spacing[1]:.17g} {lvl.spacing[2]:.17g} "
            f"origin {lvl.origin[0]:.17g} {lvl.origin[1]:.17g} {lvl.origin[2]:.17g}"
        )
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for lvl in field.levels:
            fh.write(lvl.coeffs.astype("<f8").tobytes(order="C"))


def read_field(path: str) -> BSplineField:
    with open(path, "rb") as fh:
        first = fh.readline().decode("ascii").split()
        if first[:1] != ["bsplinefield"]:
            raise PreconditionError("not a B-spline field file")
        n_levels = int(fh.readline().decode("ascii").split()[1])
        geom = []
        for _ in range(n_levels):
            parts = fh.readline().decode("ascii").split()
            dims = tuple(int(x) for x in parts[3:6])
            spacing = np.array([float(x) for x in parts[7:10]])
            origin = np.array([float(x) for x in parts[11:14]])
            geom.append((dims, spacing, origin))
        if fh.readline().decode("ascii").strip() != "end_header":
            raise PreconditionError("malformed field header")
        levels = []
        for dims, spacing, origin in geom:
            count = int(np.prod(dims)) * 3
            coeffs = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(*dims, 3)
            levels.append(ControlGrid(origin, spacing, coeffs.copy()))
    return BSplineField(levels)


# -- decoupled appendages -----------------------------------------------------------


def write_decoupled(dec: DecoupledAppendage, mesh_path: str) -> None:
    """Mesh file plus a sidecar text file (edge loop indices, cut plane)."""
    write_mesh(dec.mesh, mesh_path)
    sidecar = mesh_path + ".cut.txt"
    with open(sidecar, "w") as fh:
        n = dec.cut_plane.normal
        p = dec.cut_plane.point
        fh.write(f"plane_normal {n[0]:.17g} {n[1]:.17g} {n[2]:.17g}\n")
        fh.write(f"plane_point {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        fh.write(f"clean_cut {int(dec.clean_cut)}\n")
        fh.write("edge_loop " + " ".join(str(i) for i in dec.edge_loop) + "\n")


def read_decoupled(mesh_path: str) -> DecoupledAppendage:
    mesh = read_mesh(mesh_path)
    fields = {}
    with open(mesh_path + ".cut.txt") as fh:
        for line in fh:
            key, *vals = line.split()
            fields[key] = vals
    plane = Plane(
        [float(x) for x in fields["plane_normal"]],
        [float(x) for x in fields["plane_point"]],
    )
    loop = np.array([int(x) for x in fields["edge_loop"]], dtype=np.int64)
    return DecoupledAppendage(mesh, loop, plane, clean_cut=bool(int(fields["clean_cut"][0])))


# -- shape and mixture models -------------------------------------------------------


def write_ssm(model: SsmModel, directory: str) -> None:
    """Versioned directory container: manifest + raw arrays + template mesh."""
    os.makedirs(directory, exist_ok=True)
    n = len(model.mean)
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("ssmmodel 1\n")
        fh.write(f"coords {n}\n")
        fh.write(f"modes {model.n_modes}\n")
        fh.write(f"n_train {model.n_train}\n")
        fh.write("eigenvalues " + " ".join(f"{v:.17g}" for v in model.eigenvalues) + "\n")
        fh.write("spectrum " + " ".join(f"{v:.17g}" for v in model.spectrum) + "\n")
    model.mean.astype("<f8").tofile(os.path.join(directory, "mean.f64"))
    model.loadings.astype("<f8").tofile(os.path.join(directory, "loadings.f64"))
    write_mesh(model.mean_mesh(), os.path.join(directory, "template.obj"))


def read_ssm(directory: str) -> SsmModel:
    fields = {}
    with open(os.path.join(directory, "manifest.txt")) as fh:
        version = fh.readline().split()
        if version[:1] != ["ssmmodel"]:
            raise PreconditionError("not a shape model container")
        for line in fh:
            key, *vals = line.split()
            fields[key] = vals
    n = int(fields["coords"][0])
    t = int(fields["modes"][0])
    mean = np.fromfile(os.path.join(directory, "mean.f64"), dtype="<f8")
    loadings = np.fromfile(os.path.join(directory, "loadings.f64"), dtype="<f8").reshape(n, t)
    mesh = read_mesh(os.path.join(directory, "template.obj"))
    return SsmModel(
        mean=mean,
        loadings=loadings,
        eigenvalues=np.array([float(v) for v in fields["eigenvalues"]]),
        spectrum=np.array([float(v) for v in fields["spectrum"]]),
        connectivity=mesh.triangles,
        n_train=int(fields["n_train"][0]),
    )


def write_gmm(model: GmmModel, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("gmmmodel 1\n")
        fh.write(f"components {model.n_components}\n")
        fh.write(f"dim {model.dim}\n")
        fh.write("weights " + " ".join(f"{v:.17g}" for v in model.weights) + "\n")
    model.means.astype("<f8").tofile(os.path.join(directory, "means.f64"))
    model.covariances.astype("<f8").tofile(os.path.join(directory, "covariances.f64"))


def read_gmm(directory: str) -> GmmModel:
    fields = {}
    with open(os.path.join(directory, "manifest.txt")) as fh:
        version = fh.readline().split()
        if version[:1] != ["gmmmodel"]:
            raise PreconditionError("not a mixture model container")
        for line in fh:
            key, *vals = line.split()
            fields[key] = vals
    k = int(fields["components"][0])
    d = int(fields["dim"][0])
    means = np.fromfile(os.path.join(directory, "means.f64"), dtype="<f8").reshape(k, d)
    covs = np.fromfile(os.path.join(directory, "covariances.f64"), dtype="<f8").reshape(k, d, d)
    return GmmModel(np.array([float(v) for v in fields["weights"]]), means, covs)
