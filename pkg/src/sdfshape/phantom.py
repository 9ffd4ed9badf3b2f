"""Parametric capsule-chain phantoms with exact analytic signed distances.

A chain is a polyline of control points with per-point radii; each segment is
the convex hull of its end spheres (a rounded cone), and the chain SDF is the
hard min over segments, so it is exact outside the union and 1-Lipschitz
everywhere. These phantoms act as the ground-truth oracle for the SDF, mesh
and registration machinery, and as a synthetic population generator with two
bend-angle clusters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError
from .mesh import TriMesh


@dataclass(frozen=True)
class Lobe:
    """Optional side capsule attached to the chain centerline.

    ``t`` is the normalized arclength of the attachment point, ``direction``
    the (unit) lobe axis, ``length``/``radius`` its size in mm.
    """

    t: float
    direction: tuple[float, float, float]
    length: float
    radius: float


@dataclass(frozen=True)
class CapsuleChain:
    """Union of rounded cones along a polyline centerline."""

    control_points: np.ndarray
    radii: np.ndarray
    lobe: Lobe | None = None

    def __post_init__(self):
        cp = np.array(self.control_points, dtype=np.float64).reshape(-1, 3)
        r = np.array(self.radii, dtype=np.float64).reshape(-1)
        if len(cp) < 2:
            raise PreconditionError("chain needs at least 2 control points")
        if len(r) != len(cp):
            raise PreconditionError("one radius per control point required")
        if (r <= 0).any():
            raise PreconditionError("radii must be positive")
        seg = np.linalg.norm(np.diff(cp, axis=0), axis=1)
        if len(cp) > 2 and (seg == 0).any():
            raise PreconditionError("consecutive control points must be distinct")
        cp.flags.writeable = False
        r.flags.writeable = False
        object.__setattr__(self, "control_points", cp)
        object.__setattr__(self, "radii", r)

    @property
    def bend_angle(self) -> float:
        """Maximum turn angle (degrees) over interior joints."""
        d = np.diff(self.control_points, axis=0)
        norms = np.linalg.norm(d, axis=1)
        keep = norms > 0
        d = d[keep] / norms[keep][:, None]
        if len(d) < 2:
            return 0.0
        cosang = np.clip(np.einsum("ij,ij->i", d[:-1], d[1:]), -1.0, 1.0)
        return float(np.degrees(np.arccos(cosang)).max())

    def segments(self) -> list[tuple[np.ndarray, np.ndarray, float, float]]:
        """(a, b, ra, rb) per rounded-cone member, lobe included."""
        out = []
        cp, r = self.control_points, self.radii
        for i in range(len(cp) - 1):
            out.append((cp[i], cp[i + 1], r[i], r[i + 1]))
        if self.lobe is not None:
            a = self.point_at(self.lobe.t)
            direction = np.asarray(self.lobe.direction, dtype=np.float64)
            direction = direction / np.linalg.norm(direction)
            b = a + self.lobe.length * direction
            out.append((a, b, self.lobe.radius, self.lobe.radius))
        return out

    def point_at(self, t: float) -> np.ndarray:
        """Centerline point at normalized arclength t in [0, 1]."""
        cp = self.control_points
        seg = np.linalg.norm(np.diff(cp, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        s = np.clip(t, 0.0, 1.0) * cum[-1]
        i = min(np.searchsorted(cum, s, side="right") - 1, len(seg) - 1)
        local = 0.0 if seg[i] == 0 else (s - cum[i]) / seg[i]
        return cp[i] + local * (cp[i + 1] - cp[i])

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box of the union (mm)."""
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for a, b, ra, rb in self.segments():
            lo = np.minimum(lo, np.minimum(a - ra, b - rb))
            hi = np.maximum(hi, np.maximum(a + ra, b + rb))
        return lo, hi


def round_cone_sdf(p: np.ndarray, a, b, r1: float, r2: float) -> np.ndarray:
    """Exact signed distance to the hull of spheres (a, r1) and (b, r2).

    Equals min over t of |p - lerp(a,b,t)| - lerp(r1,r2,t); closed form with
    a single square root per point (Quilez's round-cone distance).
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ba = b - a
    l2 = float(ba @ ba)
    if l2 == 0.0:
        return np.linalg.norm(p - a, axis=1) - max(r1, r2)
    rr = r1 - r2
    a2 = l2 - rr * rr
    if a2 <= 0.0:
        # one end sphere swallows the other
        if r1 >= r2:
            return np.linalg.norm(p - a, axis=1) - r1
        return np.linalg.norm(p - b, axis=1) - r2
    il2 = 1.0 / l2

    pa = p - a
    y = pa @ ba
    z = y - l2
    d = pa * l2 - np.outer(y, ba)
    x2 = np.einsum("ij,ij->i", d, d)
    y2 = y * y * l2
    z2 = z * z * l2

    k = np.sign(rr) * rr * rr * x2
    out = (np.sqrt(x2 * a2 * il2) + y * rr) * il2 - r1
    cap_b = np.sign(z) * a2 * z2 > k
    cap_a = np.sign(y) * a2 * y2 < k
    out = np.where(cap_a, np.sqrt(x2 + y2) * il2 - r1, out)
    out = np.where(cap_b, np.sqrt(x2 + z2) * il2 - r2, out)
    return out


def analytic_sdf(chain: CapsuleChain, p) -> np.ndarray:
    """Signed distance of the chain union: hard min over all members."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    best = np.full(len(p), np.inf)
    for a, b, ra, rb in chain.segments():
        best = np.minimum(best, round_cone_sdf(p, a, b, ra, rb))
    return best


def sdf_grid(chain: CapsuleChain, spacing: float, margin: float = 3.0):
    """Sample the analytic SDF on a regular grid covering the chain."""
    from .grid import VoxelGrid

    lo, hi = chain.bounds()
    lo -= margin
    hi += margin
    dims = np.maximum(np.ceil((hi - lo) / spacing).astype(int) + 1, 2)
    origin = lo
    nx, ny, nz = dims
    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    pts = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3) * spacing + origin
    vals = analytic_sdf(chain, pts).reshape(dims)
    return VoxelGrid(vals, (spacing,) * 3, origin, kind="SDF")


def chain_to_mesh(chain: CapsuleChain, spacing: float) -> TriMesh:
    """Triangulate the chain surface: marching cubes on the analytic SDF."""
    from .isosurface import largest_surface_component, marching_cubes

    if spacing <= 0:
        raise PreconditionError("spacing must be positive")
    grid = sdf_grid(chain, spacing)
    return largest_surface_component(marching_cubes(grid, 0.0))


def make_hourglass(
    r_end: float = 5.0, r_waist: float = 2.5, half_length: float = 25.0
) -> CapsuleChain:
    """Two opposed rounded cones sharing a thin waist sphere at the origin."""
    cp = [(-half_length, 0.0, 0.0), (0.0, 0.0, 0.0), (half_length, 0.0, 0.0)]
    return CapsuleChain(cp, [r_end, r_waist, r_end])


def hourglass_waist_area(chain: CapsuleChain) -> float:
    """Smallest cross-section area of an hourglass chain (tangency ring)."""
    a, b, r1, r2 = chain.segments()[0]
    length = np.linalg.norm(b - a)
    sinphi = (r1 - r2) / length
    r_min = min(r1, r2) * np.sqrt(1.0 - sinphi * sinphi)
    return float(np.pi * r_min ** 2)


@dataclass(frozen=True)
class ClusterSpec:
    """Per-cluster parameter distributions for the synthetic population."""

    label: str
    fraction: float
    bend_mean_deg: float
    bend_sigma_deg: float
    lobe_probability: float = 0.0


@dataclass(frozen=True)
class PopulationSpec:
    """Population sampler configuration.

    Defaults mimic a bimodal anatomy: cluster A has a pronounced bend of the
    main lobe (folds back on itself), cluster B is near-straight.
    """

    n_shapes: int = 100
    seed: int = 0
    clusters: tuple[ClusterSpec, ...] = (
        ClusterSpec("A", 0.5, 100.0, 10.0),
        ClusterSpec("B", 0.5, 15.0, 10.0),
    )
    parent_radius: float = 11.0
    neck_radius: float = 3.0
    tube_radius: float = 3.4
    tip_radius: float = 2.4
    parent_length: float = 16.0
    neck_to_elbow: float = 14.0
    elbow_to_tip: float = 16.0
    jitter: float = 0.06

    def __post_init__(self):
        if self.n_shapes < 2:
            raise PreconditionError("population needs at least 2 shapes")
        total = sum(c.fraction for c in self.clusters)
        if abs(total - 1.0) > 1e-9:
            raise PreconditionError("cluster fractions must sum to 1")


def build_appendage_chain(
    spec: PopulationSpec, bend_deg: float, scale: float = 1.0,
    lobe: Lobe | None = None,
) -> CapsuleChain:
    """Parent blob + neck + bent appendage as one capsule chain."""
    theta = np.radians(bend_deg)
    p0 = np.array([0.0, 0.0, 0.0])
    p1 = p0 + [spec.parent_length, 0.0, 0.0]
    p2 = p1 + [spec.neck_to_elbow, 0.0, 0.0]
    p3 = p2 + spec.elbow_to_tip * np.array([np.cos(theta), np.sin(theta), 0.0])
    cp = np.array([p0, p1, p2, p3]) * scale
    radii = np.array(
        [spec.parent_radius, spec.neck_radius, spec.tube_radius, spec.tip_radius]
    ) * scale
    return CapsuleChain(cp, radii, lobe=lobe)


def sample_population(spec: PopulationSpec, mesh_spacing: float | None = None):
    """Draw a seed-deterministic population of (chain-or-mesh, label, params).

    Cluster bend angles are Gaussian per cluster, truncated at >= 0. Returns
    meshes when ``mesh_spacing`` is given, otherwise the chains themselves.
    """
    rng = np.random.default_rng(spec.seed)
    counts = _cluster_counts(spec)
    out = []
    for cluster, count in zip(spec.clusters, counts):
        for _ in range(count):
            bend = rng.normal(cluster.bend_mean_deg, cluster.bend_sigma_deg)
            while bend < 0:
                bend = rng.normal(cluster.bend_mean_deg, cluster.bend_sigma_deg)
            scale = float(np.exp(rng.normal(0.0, spec.jitter)))
            lobe = None
            if rng.uniform() < cluster.lobe_probability:
                direction = rng.normal(size=3)
                direction[0] = abs(direction[0]) * 0.2
                direction /= np.linalg.norm(direction)
                lobe = Lobe(t=0.85, direction=tuple(direction), length=7.0, radius=2.0)
            chain = build_appendage_chain(spec, bend, scale, lobe)
            params = {"bend_angle": bend, "scale": scale, "has_lobe": lobe is not None}
            shape = chain if mesh_spacing is None else _as_mesh(chain, mesh_spacing)
            out.append((shape, cluster.label, params))
    return out


def _as_mesh(chain: CapsuleChain, spacing: float) -> TriMesh:
    return chain_to_mesh(chain, spacing)


def _cluster_counts(spec: PopulationSpec) -> list[int]:
    counts = [int(round(c.fraction * spec.n_shapes)) for c in spec.clusters]
    counts[-1] += spec.n_shapes - sum(counts)
    return counts
