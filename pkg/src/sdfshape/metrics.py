"""Segmentation and mesh evaluation metrics.

Mesh metrics are sample-based: points are drawn area-uniformly (triangle
choice proportional to area, barycentric-uniform within) from per-mesh
generators seeded identically, so paired metrics are symmetric and
seed-deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .errors import PreconditionError
from .grid import VoxelGrid
from .mesh import TriMesh
from .surfquery import SurfaceLocator


@dataclass(frozen=True)
class MetricReport:
    """One evaluation record; distances in mm, fractions in [0, 1]."""

    dice: float
    contour_dice: float
    chamfer_mm: float
    emd_mm: float
    accuracy_mm: float
    completion: float
    cosine: float

    FIELDS = ("dice", "contour_dice", "chamfer_mm", "emd_mm",
              "accuracy_mm", "completion", "cosine")

    def as_row(self) -> list[float]:
        return [getattr(self, f) for f in self.FIELDS]


def _check_same_geometry(a: VoxelGrid, b: VoxelGrid):
    if a.dims != b.dims or not np.allclose(a.spacing, b.spacing) \
            or not np.allclose(a.origin, b.origin):
        raise PreconditionError("label grids have mismatched geometry")


def dice(a: VoxelGrid, b: VoxelGrid) -> float:
    """2|A.B| / (|A|+|B|); 1.0 when both labelmaps are empty."""
    _check_same_geometry(a, b)
    fa = a.values > 0
    fb = b.values > 0
    denom = fa.sum() + fb.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (fa & fb).sum() / denom)


def _boundary_voxels(fg: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-neighbour background voxel (or grid edge)."""
    eroded = ndimage.binary_erosion(fg, structure=ndimage.generate_binary_structure(3, 1))
    return fg & ~eroded


def contour_dice(a: VoxelGrid, b: VoxelGrid, band_mm: float = 3.0) -> float:
    """Dice restricted to the band around the union of both label boundaries."""
    _check_same_geometry(a, b)
    fa = a.values > 0
    fb = b.values > 0
    boundary = _boundary_voxels(fa) | _boundary_voxels(fb)
    if not boundary.any():
        return 1.0
    dist = ndimage.distance_transform_edt(~boundary, sampling=a.spacing)
    band = dist <= band_mm
    fa_b = fa & band
    fb_b = fb & band
    denom = fa_b.sum() + fb_b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (fa_b & fb_b).sum() / denom)


def _samples(mesh: TriMesh, n: int, seed) -> tuple[np.ndarray, SurfaceLocator]:
    loc = SurfaceLocator(mesh)
    pts, tri = loc.sample_surface(n, np.random.default_rng(seed))
    return pts, tri, loc


def chamfer(a: TriMesh, b: TriMesh, n_samples: int = 30000, seed=0) -> float:
    """Symmetric mean sample-to-surface distance between two meshes."""
    pa, _, loc_a = _samples(a, n_samples, seed)
    pb, _, loc_b = _samples(b, n_samples, seed)
    d_ab = loc_b.query(pa)[0].mean()
    d_ba = loc_a.query(pb)[0].mean()
    return float(0.5 * (d_ab + d_ba))


def emd(a: TriMesh, b: TriMesh, n_points: int = 512, seed=0) -> float:
    """Mean matched distance under the exact optimal bipartite assignment."""
    pa, _, _ = _samples(a, n_points, seed)
    pb, _, _ = _samples(b, n_points, seed)
    cost = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def mesh_accuracy(pred: TriMesh, truth: TriMesh, quantile: float = 0.9,
                  n_samples: int = 30000, seed=0) -> float:
    """Distance quantile from predicted-surface samples to the true surface."""
    pp, _, _ = _samples(pred, n_samples, seed)
    d = SurfaceLocator(truth).query(pp)[0]
    return float(np.quantile(d, quantile))


def mesh_completion(pred: TriMesh, truth: TriMesh, tol_mm: float = 1.0,
                    n_samples: int = 30000, seed=0) -> float:
    """Fraction of true-surface samples within tol_mm of the prediction."""
    pt, _, _ = _samples(truth, n_samples, seed)
    d = SurfaceLocator(pred).query(pt)[0]
    return float((d <= tol_mm).mean())


def cosine_similarity(pred: TriMesh, truth: TriMesh, n_samples: int = 30000, seed=0) -> float:
    """Mean normal agreement between prediction samples and the closest truth."""
    pp, tri_p, loc_p = _samples(pred, n_samples, seed)
    loc_t = SurfaceLocator(truth)
    _, _, tri_t, _ = loc_t.query(pp)
    n_pred = loc_p.face_normals[tri_p]
    n_truth = loc_t.face_normals[tri_t]
    return float(np.einsum("ij,ij->i", n_pred, n_truth).mean())


def evaluate_meshes(pred: TriMesh, truth: TriMesh, pred_label: VoxelGrid | None = None,
                    truth_label: VoxelGrid | None = None, band_mm: float = 3.0,
                    completion_tol_mm: float = 1.0, quantile: float = 0.9,
                    n_samples: int = 30000, emd_points: int = 512, seed=0) -> MetricReport:
    """Full metric suite over a prediction/truth pair."""
    have_labels = pred_label is not None and truth_label is not None
    return MetricReport(
        dice=dice(pred_label, truth_label) if have_labels else float("nan"),
        contour_dice=contour_dice(pred_label, truth_label, band_mm) if have_labels else float("nan"),
        chamfer_mm=chamfer(pred, truth, n_samples, seed),
        emd_mm=emd(pred, truth, emd_points, seed),
        accuracy_mm=mesh_accuracy(pred, truth, quantile, n_samples, seed),
        completion=mesh_completion(pred, truth, completion_tol_mm, n_samples, seed),
        cosine=cosine_similarity(pred, truth, n_samples, seed),
    )
