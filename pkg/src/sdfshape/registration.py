"""Point-correspondence machinery.

ICP similarity pre-alignment, volumetric B-spline registration of truncated
SDFs by stochastic gradient descent, and regularized projection of the
deformed source onto the target surface. The cost is
``w1 * MSD + w2 * bending + w3 * landmark`` evaluated on fresh uniform
samples from the target's near-surface mask each iteration; the step size
follows the decaying schedule a / (t + A) with ``a`` calibrated per level so
the first step moves control points at most half a control spacing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bspline import (
    HESSIAN_MULTIPLICITY,
    HESSIAN_PAIRS,
    BSplineField,
    bending_energy_of_rows,
)
from .errors import NumericalError, PreconditionError
from .grid import VoxelGrid
from .mesh import TriMesh
from .sdf import mesh_to_sdf
from .surfquery import SurfaceLocator

LANDMARK_LABELS = ("tip", "rim0", "rim1", "rim2", "rim3")


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> scale * R @ x + t with R a proper rotation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if self.scale <= 0:
            raise PreconditionError("scale must be positive")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise PreconditionError("rotation determinant must be +1")
        if np.linalg.norm(r.T @ r - np.eye(3)) > 1e-9:
            raise PreconditionError("rotation must be orthonormal")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        return self.scale * pts @ self.rotation.T + self.translation

    def apply_mesh(self, mesh: TriMesh) -> TriMesh:
        return TriMesh(self.apply(mesh.vertices), mesh.triangles)


@dataclass(frozen=True)
class LandmarkSet:
    """Five labelled points: tip plus four rim landmarks."""

    points: np.ndarray
    labels: tuple[str, ...] = LANDMARK_LABELS

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if len(pts) != 5 or len(self.labels) != 5:
            raise PreconditionError("landmark set needs exactly 5 labelled points")
        if not np.isfinite(pts).all():
            raise PreconditionError("landmark coordinates must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", tuple(self.labels))

    def transformed(self, transform: SimilarityTransform) -> "LandmarkSet":
        return LandmarkSet(transform.apply(self.points), self.labels)


@dataclass(frozen=True)
class RegistrationConfig:
    """Weights, sampling and grid parameters for the registration stack."""

    w1: float = 1.0
    w2: float = 1.5
    w3: float = 0.15
    samples_per_iter: int = 2048
    max_iters: int = 500
    mask_distance: float = 6.0
    seed: int = 0
    n_levels: int = 5
    finest_spacing: float = 8.0
    sdf_spacing: float = 1.5
    trunc: float = 5.0
    step_decay: float = 20.0
    icp_iters: int = 100
    projection_iters: int = 20
    projection_alpha: float = 0.5

    def __post_init__(self):
        if self.samples_per_iter < 1 or self.max_iters < 1:
            raise PreconditionError("samples_per_iter and max_iters must be >= 1")
        if self.mask_distance <= 0:
            raise PreconditionError("mask_distance must be positive")
        if min(self.w1, self.w2, self.w3) < 0:
            raise PreconditionError("weights must be nonnegative")


# -- ICP ---------------------------------------------------------------------


def umeyama_similarity(x: np.ndarray, y: np.ndarray) -> SimilarityTransform:
    """Closed-form least-squares similarity mapping point set x onto y."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mx, my = x.mean(axis=0), y.mean(axis=0)
    dx, dy = x - mx, y - my
    cov = dy.T @ dx / len(x)
    u, d, vt = np.linalg.svd(cov)
    s = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2] = -1.0
    r = u @ np.diag(s) @ vt
    var = (dx**2).sum() / len(x)
    if var == 0:
        raise NumericalError("degenerate point set: zero variance")
    scale = float((d * s).sum() / var)
    t = my - scale * r @ mx
    return SimilarityTransform(scale, r, t)


def icp_similarity(
    source: TriMesh,
    target: TriMesh,
    max_iters: int = 100,
    rel_tol: float = 1e-6,
    max_points: int = 4000,
    init: SimilarityTransform | None = None,
) -> SimilarityTransform:
    """Iterative closest point with a similarity transform.

    Alternates matching source vertices to the target surface with the
    closed-form Umeyama fit until the mean squared residual stops improving.
    Starts from ``init`` (identity by default); like all ICP variants it
    finds a local optimum, so a rough pre-alignment helps on large poses.
    """
    if source.n_vertices == 0 or target.n_triangles == 0:
        raise PreconditionError("meshes must be nonempty")
    x = source.vertices
    if len(x) > max_points:
        x = x[:: len(x) // max_points + 1]
    sv = np.linalg.svd(x - x.mean(axis=0), compute_uv=False)
    if sv[1] < 1e-9 * max(sv[0], 1.0):
        raise PreconditionError("degenerate source: vertices collinear")

    locator = SurfaceLocator(target)
    transform = init if init is not None else SimilarityTransform.identity()
    prev = np.inf
    for _ in range(max_iters):
        moved = transform.apply(x)
        dist, closest, _, _ = locator.query(moved)
        residual = float((dist**2).mean())
        if prev - residual < rel_tol * max(prev, 1e-12):
            break
        prev = residual
        transform = umeyama_similarity(x, closest)
    return transform


# -- cost terms --------------------------------------------------------------


def msd(
    moving: VoxelGrid, fixed: VoxelGrid, field: BSplineField, sample_points: np.ndarray
) -> float:
    """Mean squared voxel-value difference of moving(x + d(x)) vs fixed(x)."""
    pts = np.atleast_2d(np.asarray(sample_points, dtype=np.float64))
    if len(pts) == 0:
        raise PreconditionError("empty sample set")
    warped = pts + field.displacement(pts)
    return float(np.mean((moving.sample(warped) - fixed.sample(pts)) ** 2))


def bending_energy(field: BSplineField, sample_points: np.ndarray) -> float:
    """Mean summed squared second derivatives of the displacement."""
    pts = np.atleast_2d(np.asarray(sample_points, dtype=np.float64))
    if len(pts) == 0:
        raise PreconditionError("empty sample set")
    return bending_energy_of_rows(field.hessian_rows(pts))


def landmark_penalty(
    field: BSplineField, source_lms: LandmarkSet, target_lms: LandmarkSet
) -> float:
    """Mean squared distance between deformed source and target landmarks."""
    if source_lms.labels != target_lms.labels:
        raise PreconditionError("landmark label mismatch")
    x = source_lms.points
    warped = x + field.displacement(x)
    return float(((warped - target_lms.points) ** 2).sum(axis=1).mean())


# -- volumetric registration --------------------------------------------------


def bspline_register(
    source_sdf: VoxelGrid,
    target_sdf: VoxelGrid,
    config: RegistrationConfig = RegistrationConfig(),
    source_lms: LandmarkSet | None = None,
    target_lms: LandmarkSet | None = None,
    return_info: bool = False,
):
    """Multi-level B-spline registration; the field carries source onto target.

    The residual at a sample x is target(x + d(x)) - source(x), so points on
    the source zero level set are driven onto the target surface and the
    returned field composes directly with the source mesh (apply_field).
    Levels are optimized coarse to fine; coarser levels are frozen while a
    finer level descends the residual. Each iteration draws fresh uniform
    samples from the target mask (|target| < mask_distance); the ICP stage
    keeps the source surface inside that band. Deterministic for a fixed
    config seed.

    Returns the summed multi-level field, plus an info dict (per-level
    validation-cost histories and the mask size) when ``return_info``.
    """
    if source_sdf.kind != "SDF" or target_sdf.kind != "SDF":
        raise PreconditionError("registration expects SDF grids")
    if source_sdf.dims != target_sdf.dims or not np.allclose(
        source_sdf.spacing, target_sdf.spacing
    ) or not np.allclose(source_sdf.origin, target_sdf.origin):
        raise PreconditionError("grids must share one physical domain")
    if source_lms is not None and target_lms is not None:
        if source_lms.labels != target_lms.labels:
            raise PreconditionError("landmark label mismatch")
        use_lms = True
    else:
        use_lms = False

    target_flat = target_sdf.values.ravel(order="C")
    source_flat = source_sdf.values.ravel(order="C")
    mask_flat = np.flatnonzero(np.abs(target_flat) < config.mask_distance)
    if len(mask_flat) == 0:
        raise PreconditionError("no surface band overlap")
    mask_idx = np.stack(np.unravel_index(mask_flat, target_sdf.dims), axis=1)
    mask_centers = target_sdf.index_to_world(mask_idx)
    mask_values = source_flat[mask_flat]

    lo = target_sdf.origin
    hi = target_sdf.index_to_world(np.array(target_sdf.dims) - 1.0)
    fld = BSplineField.covering(lo, hi, config.n_levels, config.finest_spacing)
    # first-step travel: at most half a control spacing, and at most a voxel,
    # so coarse levels cannot overshoot into the truncation-flat region
    step_cap = float(min(np.min(target_sdf.spacing), config.mask_distance / 4.0))

    rng = np.random.default_rng(config.seed)
    val_rng = np.random.default_rng((config.seed, 0x5eed))
    val_sel = val_rng.integers(0, len(mask_flat), min(len(mask_flat), config.samples_per_iter))
    val_pts = mask_centers[val_sel]
    val_fixed = mask_values[val_sel]

    n = config.samples_per_iter
    histories = []
    for level_idx, level in enumerate(fld.levels):
        step0 = min(0.5 * float(level.spacing.min()), step_cap)
        coeffs = level.coeffs
        history = []
        for it in range(config.max_iters):
            sel = rng.integers(0, len(mask_flat), n)
            pts = mask_centers[sel]
            fixed_vals = mask_values[sel]

            cell, tloc = level._locate(pts)
            stencil = level._stencil(cell)
            w_val = level._weights(tloc)
            coeffs_flat = coeffs.reshape(-1, 3)
            gathered = coeffs_flat[stencil]

            d_frozen = fld.displacement(pts, up_to_level=level_idx)
            d_cur = np.einsum("nk,nkc->nc", w_val, gathered)
            warped = pts + d_frozen + d_cur
            m_vals, m_grad = target_sdf.sample_with_gradient(warped)
            residual = m_vals - fixed_vals

            contrib = (
                (2.0 * config.w1 / n)
                * residual[:, None, None]
                * w_val[:, :, None]
                * m_grad[:, None, :]
            )

            if config.w2 > 0:
                rows = fld.hessian_rows(pts, up_to_level=level_idx)
                w2_stack = np.empty((n, len(HESSIAN_PAIRS), 64))
                for k, (a, b) in enumerate(HESSIAN_PAIRS):
                    d = [0, 0, 0]
                    d[a] += 1
                    d[b] += 1
                    w2_stack[:, k, :] = level._weights(tloc, *d)
                rows += np.einsum("nkw,nwc->nkc", w2_stack, gathered)
                contrib += (2.0 * config.w2 / n) * np.einsum(
                    "nkc,k,nkw->nwc", rows, HESSIAN_MULTIPLICITY, w2_stack
                )

            flat_ids = stencil.ravel()
            flat_contrib = contrib.reshape(-1, 3)
            grad = np.stack(
                [
                    np.bincount(flat_ids, weights=flat_contrib[:, c],
                                minlength=len(coeffs_flat))
                    for c in range(3)
                ],
                axis=1,
            )

            if use_lms and config.w3 > 0:
                lm_pts = source_lms.points
                lm_cell, lm_t = level._locate(lm_pts)
                lm_sten = level._stencil(lm_cell)
                lm_w = level._weights(lm_t)
                lm_d = fld.displacement(lm_pts, up_to_level=level_idx) + np.einsum(
                    "nk,nkc->nc", lm_w, coeffs_flat[lm_sten]
                )
                lm_res = lm_pts + lm_d - target_lms.points
                lm_contrib = (2.0 * config.w3 / len(lm_pts)) * (
                    lm_w[:, :, None] * lm_res[:, None, :]
                )
                np.add.at(grad, lm_sten.ravel(), lm_contrib.reshape(-1, 3))

            # normalized decaying step: the largest control-point move is
            # exactly delta_t, so the first step honours the travel cap and
            # the quadratic terms cannot diverge; the floor keeps round-off
            # residuals (already-registered inputs) from driving noise steps
            gmax = np.abs(grad).max()
            if gmax > 1e-12:
                delta = step0 * config.step_decay / (it + config.step_decay)
                coeffs_flat -= (delta / gmax) * grad

            if return_info:
                history.append(
                    _total_cost(target_sdf, fld, config, val_pts, val_fixed,
                                source_lms, target_lms, use_lms)
                )
        histories.append(history)

    if return_info:
        return fld, {"histories": histories, "mask_size": len(mask_flat)}
    return fld


def _total_cost(moving_sdf, fld, config, pts, fixed_vals, source_lms, target_lms, use_lms):
    warped = pts + fld.displacement(pts)
    cost = config.w1 * float(np.mean((moving_sdf.sample(warped) - fixed_vals) ** 2))
    if config.w2 > 0:
        cost += config.w2 * bending_energy_of_rows(fld.hessian_rows(pts))
    if use_lms and config.w3 > 0:
        cost += config.w3 * landmark_penalty(fld, source_lms, target_lms)
    return cost


def apply_field(mesh: TriMesh, fld: BSplineField) -> TriMesh:
    """Deform every vertex by the field; connectivity unchanged."""
    return TriMesh(mesh.vertices + fld.displacement(mesh.vertices), mesh.triangles,
                   strict=False)


# -- correspondence projection -------------------------------------------------


def project_correspondence(
    deformed_source: TriMesh,
    target: TriMesh,
    smooth_iters: int = 20,
    alpha: float = 0.5,
) -> TriMesh:
    """Snap the deformed source onto the target under smoothed displacements.

    The per-vertex closest-point displacement field is alternately smoothed
    over the source 1-ring graph and re-projected; the final vertices lie
    exactly on the target surface with source connectivity.
    """
    if deformed_source.n_triangles == 0 or target.n_triangles == 0:
        raise PreconditionError("meshes must be nonempty")
    locator = SurfaceLocator(target)
    x = deformed_source.vertices
    disp = locator.query(x)[1] - x

    e = np.unique(deformed_source.edges_sorted(), axis=0)
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    degree = np.bincount(src, minlength=len(x)).astype(np.float64)
    degree[degree == 0] = 1.0

    for _ in range(smooth_iters):
        sums = np.zeros_like(disp)
        np.add.at(sums, src, disp[dst])
        disp = (1.0 - alpha) * disp + alpha * sums / degree[:, None]
        disp = locator.query(x + disp)[1] - x
    return TriMesh(x + disp, deformed_source.triangles, strict=False)


def rms_surface_distance(a: TriMesh, b: TriMesh) -> float:
    """Root mean squared distance from a's vertices to b's surface."""
    if a.n_vertices == 0 or b.n_triangles == 0:
        raise PreconditionError("meshes must be nonempty")
    d = SurfaceLocator(b).query(a.vertices)[0]
    return float(np.sqrt((d**2).mean()))


# -- full pipeline --------------------------------------------------------------


@dataclass
class RegistrationResult:
    corresponded: TriMesh
    warped: TriMesh
    field: BSplineField
    icp: SimilarityTransform
    rms_fit: float
    rms_coverage: float


def register_surfaces(
    source: TriMesh,
    target: TriMesh,
    config: RegistrationConfig = RegistrationConfig(),
    source_lms: LandmarkSet | None = None,
    target_lms: LandmarkSet | None = None,
    closed_source: TriMesh | None = None,
    closed_target: TriMesh | None = None,
) -> RegistrationResult:
    """ICP -> SDF conversion -> B-spline registration -> projection.

    Landmarks, when given, ride with the source through the ICP stage and
    regularize the volumetric registration; they also seed the ICP with the
    closed-form similarity between the two landmark sets, which gives the
    gross pose when the shapes differ strongly (a bent versus a straight
    appendage). Open surfaces (decoupled appendages) have no signed
    distance; pass watertight closures via ``closed_source``/
    ``closed_target`` for the volumetric stage while the correspondence
    itself stays on the open meshes.
    """
    icp_init = None
    if source_lms is not None and target_lms is not None:
        icp_init = umeyama_similarity(source_lms.points, target_lms.points)
    icp = icp_similarity(source, target, max_iters=config.icp_iters, init=icp_init)
    source_icp = icp.apply_mesh(source)
    lms_icp = source_lms.transformed(icp) if source_lms is not None else None

    vol_source = icp.apply_mesh(closed_source) if closed_source is not None else source_icp
    vol_target = closed_target if closed_target is not None else target

    pad = config.mask_distance + 2.0 * config.sdf_spacing
    lo = np.minimum(vol_source.vertices.min(axis=0), vol_target.vertices.min(axis=0)) - pad
    hi = np.maximum(vol_source.vertices.max(axis=0), vol_target.vertices.max(axis=0)) + pad
    spacing = (config.sdf_spacing,) * 3
    dims = np.ceil((hi - lo) / config.sdf_spacing).astype(int) + 1

    source_sdf = mesh_to_sdf(vol_source, dims, spacing, lo, trunc=config.trunc)
    target_sdf = mesh_to_sdf(vol_target, dims, spacing, lo, trunc=config.trunc)

    fld = bspline_register(source_sdf, target_sdf, config, lms_icp, target_lms)
    warped = apply_field(source_icp, fld)
    corresponded = project_correspondence(
        warped, target, config.projection_iters, config.projection_alpha
    )
    return RegistrationResult(
        corresponded=corresponded,
        warped=warped,
        field=fld,
        icp=icp,
        rms_fit=rms_surface_distance(warped, target),
        rms_coverage=rms_surface_distance(target, corresponded),
    )
