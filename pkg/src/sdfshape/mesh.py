"""Indexed triangle surfaces in millimetre coordinates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError

MIN_TRIANGLE_AREA = 1e-12  # mm^2


@dataclass(frozen=True)
class TriMesh:
    """Immutable indexed triangle mesh.

    Parameters
    ----------
    vertices : (n, 3) float array
        Vertex positions in mm.
    triangles : (m, 3) int array
        Vertex index triples.
    strict : bool
        Enforce the no-degenerate-triangle invariant. Deformation products
        (projected correspondences, synthesized shapes) may legitimately
        carry collapsed triangles and are built with strict=False.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    strict: bool = True

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64, order="C")
        t = np.array(self.triangles, dtype=np.int64, order="C")
        if v.ndim != 2 or v.shape[1] != 3:
            raise PreconditionError("vertices must be (n, 3)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise PreconditionError("triangles must be (m, 3)")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise PreconditionError("triangle index out of range")
        if t.size:
            if ((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])).any():
                raise PreconditionError("triangle with repeated vertex index")
            if self.strict and (triangle_areas_of(v, t) <= MIN_TRIANGLE_AREA).any():
                raise PreconditionError("zero-area triangle")
        v.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def corners(self) -> np.ndarray:
        """(m, 3, 3) array of triangle corner positions."""
        return self.vertices[self.triangles]

    def triangle_areas(self) -> np.ndarray:
        return triangle_areas_of(self.vertices, self.triangles)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def face_normals(self) -> np.ndarray:
        """Unit normals, right-hand rule over the vertex order."""
        c = self.corners()
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(norm, 1e-300)

    def centroid(self) -> np.ndarray:
        """Area-weighted surface centroid (mm)."""
        c = self.corners().mean(axis=1)
        w = self.triangle_areas()
        return (c * w[:, None]).sum(axis=0) / w.sum()

    def volume(self) -> float:
        """Signed enclosed volume via the divergence theorem (mm^3)."""
        c = self.corners()
        return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)

    def edges_sorted(self) -> np.ndarray:
        """(3m, 2) array of per-triangle edges with sorted vertex pairs."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=0)
        return np.sort(e, axis=1)

    def is_closed(self) -> bool:
        """True when every undirected edge is shared by exactly two triangles."""
        if self.n_triangles == 0:
            return False
        _, counts = np.unique(self.edges_sorted(), axis=0, return_counts=True)
        return bool((counts == 2).all())

    def vertex_adjacency(self) -> list[np.ndarray]:
        """1-ring neighbour indices per vertex."""
        e = np.unique(self.edges_sorted(), axis=0)
        order = np.concatenate([e[:, 0], e[:, 1]])
        other = np.concatenate([e[:, 1], e[:, 0]])
        sort = np.argsort(order, kind="stable")
        order, other = order[sort], other[sort]
        starts = np.searchsorted(order, np.arange(self.n_vertices + 1))
        return [other[starts[i]:starts[i + 1]] for i in range(self.n_vertices)]


def triangle_areas_of(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    c = vertices[triangles]
    return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)


def submesh(mesh: TriMesh, triangle_idx: np.ndarray) -> TriMesh:
    """Sub-mesh of the given triangles with vertex indices compacted."""
    tris = mesh.triangles[np.asarray(triangle_idx)]
    used, inverse = np.unique(tris.ravel(), return_inverse=True)
    return TriMesh(mesh.vertices[used], inverse.reshape(-1, 3))


def cap_boundaries(mesh: TriMesh) -> TriMesh:
    """Close every open boundary loop with a centroid fan.

    Fan triangles reverse the boundary's directed edges, so a consistently
    oriented input stays consistently oriented. Used to make cut (open)
    surfaces watertight for signed-distance conversion.
    """
    t = mesh.triangles
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=0)
    nv = mesh.n_vertices
    keys = np.minimum(directed[:, 0], directed[:, 1]) * nv + np.maximum(
        directed[:, 0], directed[:, 1]
    )
    uniq, counts = np.unique(keys, return_counts=True)
    single = set(uniq[counts == 1].tolist())
    boundary = directed[[int(k) in single for k in keys]]
    if len(boundary) == 0:
        return mesh

    nxt = {int(a): int(b) for a, b in boundary}
    verts = list(mesh.vertices)
    tris = list(t)
    seen = set()
    for start in sorted(nxt):
        if start in seen:
            continue
        cycle = [start]
        seen.add(start)
        cur = nxt.get(start)
        while cur is not None and cur != start and cur not in seen:
            cycle.append(cur)
            seen.add(cur)
            cur = nxt.get(cur)
        if cur != start or len(cycle) < 3:
            continue
        center = np.mean([verts[i] for i in cycle], axis=0)
        verts.append(center)
        c_id = len(verts) - 1
        for k in range(len(cycle)):
            a, b = cycle[k], cycle[(k + 1) % len(cycle)]
            tris.append((c_id, b, a))
    return TriMesh(np.asarray(verts), np.asarray(tris, dtype=np.int64))


def triangle_components(mesh: TriMesh) -> np.ndarray:
    """Label edge-connected triangle components, labels in first-seen order."""
    edges = mesh.edges_sorted()
    tri_of_edge = np.tile(np.arange(mesh.n_triangles), 3)
    keys = edges[:, 0].astype(np.int64) * mesh.n_vertices + edges[:, 1]
    order = np.argsort(keys, kind="stable")
    keys_s, tris_s = keys[order], tri_of_edge[order]
    boundaries = np.flatnonzero(np.diff(keys_s)) + 1
    groups = np.split(tris_s, boundaries)

    # union-find over triangles sharing an edge
    parent = np.arange(mesh.n_triangles)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for g in groups:
        for other in g[1:]:
            ra, rb = find(g[0]), find(other)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

    roots = np.fromiter((find(i) for i in range(mesh.n_triangles)), dtype=np.int64)
    _, labels = np.unique(roots, return_inverse=True)
    return labels
