"""Separation of an appendage from its parent surface by an optimal plane.

The plane is fitted to transferred neck points by SVD, locally refined by
random perturbations that minimize the sliced cross-section area, and the
mesh is split along it. The open boundary of the kept part (the decoupled
edge) drives five automatically derived landmarks: the tip (surface point
with the largest mean distance to the edge) and four rim points equally
spaced along the edge loop.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError
from .mesh import MIN_TRIANGLE_AREA, TriMesh, triangle_areas_of, triangle_components
from .registration import LANDMARK_LABELS, LandmarkSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Plane:
    """Oriented plane from a unit normal and a point on it."""

    normal: np.ndarray
    point: np.ndarray

    def __post_init__(self):
        n = np.array(self.normal, dtype=np.float64).reshape(3)
        p = np.array(self.point, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise PreconditionError("plane normal must be unit length")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "point", p)

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(pts) - self.point) @ self.normal

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        """Orthonormal in-plane axes (u, v) with u x v = normal."""
        n = self.normal
        helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(helper, n)
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        return u, v


@dataclass(frozen=True)
class DecoupledAppendage:
    """Open appendage mesh, its ordered boundary loop, and the cutting plane."""

    mesh: TriMesh
    edge_loop: np.ndarray
    cut_plane: Plane
    clean_cut: bool = True


def fit_plane_svd(points: np.ndarray, away_from: np.ndarray | None = None) -> Plane:
    """Least-squares plane through a point cloud.

    The plane point is the centroid and the normal the singular vector of
    the smallest singular value. When ``away_from`` is given the normal is
    oriented to point from it toward the centroid; otherwise toward +z
    (ties toward +y, then +x).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(pts) < 3:
        raise PreconditionError("plane fit needs at least 3 points")
    centroid = pts.mean(axis=0)
    u, s, vt = np.linalg.svd(pts - centroid)
    if s[1] < 1e-12 * max(s[0], 1.0):
        raise PreconditionError("plane undetermined: points collinear")
    normal = vt[2]
    if away_from is not None:
        reference = centroid - np.asarray(away_from, dtype=np.float64)
        if normal @ reference < 0:
            normal = -normal
    else:
        for axis in (2, 1, 0):
            if abs(normal[axis]) > 1e-12:
                if normal[axis] < 0:
                    normal = -normal
                break
    return Plane(normal, centroid)


# -- plane/mesh intersection ---------------------------------------------------


def _intersection_segments(mesh: TriMesh, plane: Plane):
    """Oriented intersection segments per crossing triangle.

    Every segment is directed so that (segment direction) x (plane normal)
    points out of the solid, i.e. loops wind counterclockwise around the
    normal for outward-oriented meshes. Returns segment endpoints, the
    segment's edge keys (for chaining), and the crossing triangle index.
    """
    sd = plane.signed_distance(mesh.vertices)
    # keep exact zeros off the plane for a clean two-side classification
    eps = 1e-12 * max(1.0, np.abs(sd).max())
    sd = np.where(sd == 0.0, eps, sd)

    tri = mesh.triangles
    tri_sd = sd[tri]
    pos = tri_sd > 0
    n_pos = pos.sum(axis=1)
    crossing = np.flatnonzero((n_pos > 0) & (n_pos < 3))
    if len(crossing) == 0:
        raise PreconditionError("plane does not intersect the mesh")

    segs = []
    seg_keys = []
    seg_tris = []
    nv = mesh.n_vertices
    for t_idx in crossing:
        ids = tri[t_idx]
        d = sd[ids]
        lone = 0 if (d[0] > 0) != (d[1] > 0) and (d[0] > 0) != (d[2] > 0) else (
            1 if (d[1] > 0) != (d[0] > 0) and (d[1] > 0) != (d[2] > 0) else 2
        )
        a = ids[lone]
        b = ids[(lone + 1) % 3]
        c = ids[(lone + 2) % 3]
        da, db, dc = sd[a], sd[b], sd[c]
        pab = mesh.vertices[a] + (da / (da - db)) * (mesh.vertices[b] - mesh.vertices[a])
        pac = mesh.vertices[a] + (da / (da - dc)) * (mesh.vertices[c] - mesh.vertices[a])
        # orient: walking the triangle a->b->c keeps the lone-vertex side on
        # the left; flip when the lone vertex is below the plane
        if da > 0:
            seg = (pab, pac)
            keys = (_edge_key(a, b, nv), _edge_key(a, c, nv))
        else:
            seg = (pac, pab)
            keys = (_edge_key(a, c, nv), _edge_key(a, b, nv))
        segs.append(seg)
        seg_keys.append(keys)
        seg_tris.append(t_idx)
    return np.array(segs), np.array(seg_keys), np.array(seg_tris)


def _edge_key(i: int, j: int, nv: int) -> int:
    return min(i, j) * nv + max(i, j)


def _chain_loops(seg_keys: np.ndarray):
    """Order segments into closed loops by shared mesh-edge keys."""
    start_of = {}
    for i, (k0, _) in enumerate(seg_keys):
        start_of.setdefault(int(k0), []).append(i)
    used = np.zeros(len(seg_keys), dtype=bool)
    loops = []
    for i in range(len(seg_keys)):
        if used[i]:
            continue
        loop = [i]
        used[i] = True
        while True:
            k_end = int(seg_keys[loop[-1]][1])
            nxt = None
            for j in start_of.get(k_end, ()):
                if not used[j]:
                    nxt = j
                    break
            if nxt is None:
                break
            loop.append(nxt)
            used[nxt] = True
            if int(seg_keys[nxt][1]) == int(seg_keys[loop[0]][0]):
                break
        loops.append(loop)
    return loops


def cross_section_area(mesh: TriMesh, plane: Plane) -> float:
    """Enclosed area of the mesh/plane intersection near the plane point.

    Intersection loops are grouped by the surface component they cross;
    only the group containing the loop nearest the plane point counts.
    Signed shoelace areas summed over that group handle nested loops
    (annular sections) correctly.
    """
    segs, seg_keys, seg_tris = _intersection_segments(mesh, plane)
    loops = _chain_loops(seg_keys)
    comp = triangle_components(mesh)

    u, v = plane.basis()
    origin = plane.point

    loop_area = []
    loop_dist = []
    loop_comp = []
    for loop in loops:
        p0 = (segs[loop, 0] - origin) @ np.stack([u, v], axis=1)
        p1 = (segs[loop, 1] - origin) @ np.stack([u, v], axis=1)
        area = 0.5 * np.sum(p0[:, 0] * p1[:, 1] - p1[:, 0] * p0[:, 1])
        loop_area.append(area)
        loop_dist.append(np.linalg.norm(p0, axis=1).min())
        loop_comp.append(comp[seg_tris[loop[0]]])

    nearest = int(np.argmin(loop_dist))
    group = loop_comp[nearest]
    total = sum(a for a, c in zip(loop_area, loop_comp) if c == group)
    return float(abs(total))


def optimize_cut_plane(
    mesh: TriMesh,
    init: Plane,
    n_trials: int = 200,
    angle_sigma_deg: float = 5.0,
    shift_sigma_mm: float = 1.0,
    seed: int = 0,
) -> Plane:
    """Random local refinement: smallest cross-section among perturbed planes.

    Perturbations rotate the normal by a Gaussian angle about a random
    in-plane axis and shift the point along the normal by a Gaussian
    offset; the initial plane is part of the candidate set, so the result
    never has a larger area. Seed-deterministic (stable argmin by trial
    index). Logs a warning and returns ``init`` when every trial misses.
    """
    rng = np.random.default_rng(seed)
    best_plane = None
    best_area = np.inf
    try:
        best_area = cross_section_area(mesh, init)
        best_plane = init
    except PreconditionError:
        pass

    for _ in range(n_trials):
        angle = np.radians(rng.normal(0.0, angle_sigma_deg))
        axis = rng.normal(size=3)
        axis -= (axis @ init.normal) * init.normal
        norm = np.linalg.norm(axis)
        shift = rng.normal(0.0, shift_sigma_mm)
        if norm == 0:
            continue
        axis /= norm
        normal = _rotate(init.normal, axis, angle)
        candidate = Plane(normal, init.point + shift * init.normal)
        try:
            area = cross_section_area(mesh, candidate)
        except PreconditionError:
            continue
        if area < best_area:
            best_area = area
            best_plane = candidate

    if best_plane is None:
        log.warning("optimize_cut_plane: no valid trial intersected the mesh")
        return init
    return best_plane


def _rotate(vec: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    out = (
        vec * np.cos(angle)
        + np.cross(axis, vec) * np.sin(angle)
        + axis * (axis @ vec) * (1.0 - np.cos(angle))
    )
    return out / np.linalg.norm(out)


# -- cutting -------------------------------------------------------------------


def cut_mesh(mesh: TriMesh, plane: Plane) -> DecoupledAppendage:
    """Split the mesh along the plane and keep the normal side.

    Crossing triangles are split exactly along the intersection (new
    vertices welded per mesh edge), so area is conserved across the split.
    When the kept side has several components the largest-area one is kept
    and the result is flagged (clean_cut=False).
    """
    sd = plane.signed_distance(mesh.vertices)
    eps = 1e-12 * max(1.0, np.abs(sd).max())
    sd = np.where(sd == 0.0, eps, sd)
    tri = mesh.triangles
    pos = sd[tri] > 0
    n_pos = pos.sum(axis=1)
    if not ((n_pos > 0) & (n_pos < 3)).any():
        raise PreconditionError("plane does not intersect the mesh")

    verts = list(mesh.vertices)
    new_tris = [t for t in tri[n_pos == 3]]
    cut_vertex = {}
    nv = mesh.n_vertices

    def vertex_on_edge(i, j):
        key = _edge_key(int(i), int(j), nv)
        if key not in cut_vertex:
            di, dj = sd[i], sd[j]
            p = mesh.vertices[i] + (di / (di - dj)) * (mesh.vertices[j] - mesh.vertices[i])
            verts.append(p)
            cut_vertex[key] = len(verts) - 1
        return cut_vertex[key]

    for t_idx in np.flatnonzero((n_pos > 0) & (n_pos < 3)):
        ids = tri[t_idx]
        d = sd[ids]
        lone_local = [k for k in range(3) if (d[k] > 0) != (d[(k + 1) % 3] > 0)
                      and (d[k] > 0) != (d[(k + 2) % 3] > 0)][0]
        a, b, c = ids[lone_local], ids[(lone_local + 1) % 3], ids[(lone_local + 2) % 3]
        m_ab = vertex_on_edge(a, b)
        m_ca = vertex_on_edge(c, a)
        if d[lone_local] > 0:
            new_tris.append((a, m_ab, m_ca))
        else:
            new_tris.append((m_ab, b, c))
            new_tris.append((m_ab, c, m_ca))

    kept = _compact(np.array(verts), np.array(new_tris, dtype=np.int64))
    labels = triangle_components(kept)
    n_comp = labels.max() + 1
    clean = n_comp == 1
    if not clean:
        areas = np.bincount(labels, weights=kept.triangle_areas())
        keep = np.flatnonzero(labels == int(np.argmax(areas)))
        kept = _compact(kept.vertices, kept.triangles[keep])
        log.warning("cut produced %d components; keeping the largest", n_comp)

    edge_loop = _boundary_loop(kept, plane)
    return DecoupledAppendage(kept, edge_loop, plane, clean_cut=clean)


def _compact(vertices: np.ndarray, triangles: np.ndarray) -> TriMesh:
    areas = triangle_areas_of(vertices, triangles)
    triangles = triangles[areas > MIN_TRIANGLE_AREA]
    used, inverse = np.unique(triangles.ravel(), return_inverse=True)
    return TriMesh(vertices[used], inverse.reshape(-1, 3))


def _boundary_loop(mesh: TriMesh, plane: Plane) -> np.ndarray:
    """Ordered cycle of boundary vertices, counterclockwise around the normal."""
    t = mesh.triangles
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=0)
    nv = mesh.n_vertices
    keys = np.minimum(directed[:, 0], directed[:, 1]) * nv + np.maximum(
        directed[:, 0], directed[:, 1]
    )
    uniq, counts = np.unique(keys, return_counts=True)
    boundary_keys = set(uniq[counts == 1].tolist())
    boundary_edges = [e for e, k in zip(directed, keys) if int(k) in boundary_keys]
    if not boundary_edges:
        raise PreconditionError("cut produced no boundary loop")

    nxt = {int(a): int(b) for a, b in boundary_edges}
    loops = []
    seen = set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        cur = nxt[start]
        while cur != start and cur not in seen:
            loop.append(cur)
            seen.add(cur)
            cur = nxt.get(cur, start)
        loops.append(loop)
    loop = max(loops, key=len)
    if len(loops) > 1:
        log.warning("cut produced %d boundary loops; keeping the longest", len(loops))

    loop = np.array(loop, dtype=np.int64)
    u, v = (plane.basis())
    flat = (mesh.vertices[loop] - plane.point) @ np.stack([u, v], axis=1)
    area2 = np.sum(flat[:, 0] * np.roll(flat[:, 1], -1) - np.roll(flat[:, 0], -1) * flat[:, 1])
    if area2 < 0:
        loop = loop[::-1].copy()
    # deterministic starting vertex
    roll = int(np.argmin(loop))
    return np.roll(loop, -roll)


# -- landmarks -----------------------------------------------------------------


def derive_landmarks(appendage: DecoupledAppendage) -> LandmarkSet:
    """Five landmarks: far tip plus four rim points on the decoupled edge.

    The tip maximizes the mean distance to the edge points (ties: lowest
    vertex index); rim0 is the edge point closest to the tip, rim1..rim3
    sit at 25/50/75% of the loop arclength from rim0, walking the loop
    counterclockwise around the cut-plane normal.
    """
    mesh = appendage.mesh
    edge_pts = mesh.vertices[appendage.edge_loop]
    mean_dist = np.linalg.norm(
        mesh.vertices[:, None, :] - edge_pts[None, :, :], axis=2
    ).mean(axis=1)
    tip_idx = int(np.argmax(mean_dist))
    tip = mesh.vertices[tip_idx]

    d_tip = np.linalg.norm(edge_pts - tip, axis=1)
    start = int(np.argmin(d_tip))
    loop = np.roll(appendage.edge_loop, -start)
    pts = mesh.vertices[loop]

    seg = np.linalg.norm(np.diff(np.vstack([pts, pts[:1]]), axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    rims = [pts[0]]
    for frac in (0.25, 0.5, 0.75):
        j = int(np.argmin(np.abs(cum[:-1] - frac * total)))
        rims.append(pts[j])
    return LandmarkSet(np.vstack([tip, *rims]), LANDMARK_LABELS)
