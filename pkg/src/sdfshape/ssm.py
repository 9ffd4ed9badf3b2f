"""Statistical shape modelling: Procrustes alignment, template building, PCA.

Shapes are vectors of concatenated (x, y, z) vertex coordinates sharing one
triangulation. The model holds the mean shape, orthonormal PCA loadings and
their eigenvalues (the full spectrum is kept so explained-variance fractions
have a well-defined denominator).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError
from .mesh import TriMesh
from .registration import RegistrationConfig, register_surfaces, rms_surface_distance, umeyama_similarity

log = logging.getLogger(__name__)


def as_shape_vector(mesh: TriMesh) -> np.ndarray:
    return mesh.vertices.reshape(-1)


def shape_to_mesh(coords: np.ndarray, connectivity: np.ndarray) -> TriMesh:
    return TriMesh(np.asarray(coords, dtype=np.float64).reshape(-1, 3), connectivity,
                   strict=False)


# -- Procrustes ----------------------------------------------------------------


def procrustes_align(
    shapes: list[np.ndarray],
    allow_scaling: bool = True,
    tol: float = 1e-8,
    max_iters: int = 100,
):
    """Generalized Procrustes alignment with similarity transforms.

    Iterates aligning every shape to the current mean and re-normalizing the
    mean (centroid at the origin, RMS vertex norm fixed to the initial
    mean's) until the mean moves less than ``tol``.

    Returns
    -------
    aligned : list of shape vectors
    mean : mean shape vector
    """
    if len(shapes) < 2:
        raise PreconditionError("need at least 2 shapes")
    pts = [np.asarray(s, dtype=np.float64).reshape(-1, 3) for s in shapes]
    n = pts[0].shape[0]
    if any(p.shape[0] != n for p in pts):
        raise PreconditionError("shapes must share the vertex count")

    mean = pts[0] - pts[0].mean(axis=0)
    scale_ref = np.sqrt((mean**2).sum(axis=1).mean())
    if scale_ref == 0:
        raise PreconditionError("degenerate reference shape")
    aligned = pts
    for _ in range(max_iters):
        aligned = [_align_one(p, mean, allow_scaling) for p in aligned]
        new_mean = np.mean(aligned, axis=0)
        new_mean -= new_mean.mean(axis=0)
        rms = np.sqrt((new_mean**2).sum(axis=1).mean())
        if rms > 0:
            new_mean *= scale_ref / rms
        shift = np.sqrt(((new_mean - mean) ** 2).sum(axis=1).mean())
        mean = new_mean
        if shift < tol:
            break
    return [a.reshape(-1) for a in aligned], mean.reshape(-1)


def _align_one(p: np.ndarray, mean: np.ndarray, allow_scaling: bool) -> np.ndarray:
    t = umeyama_similarity(p, mean)
    if not allow_scaling:
        from .registration import SimilarityTransform

        t = SimilarityTransform(1.0, t.rotation, mean.mean(axis=0) - (t.rotation @ p.mean(axis=0)))
    return t.apply(p)


# -- template building -----------------------------------------------------------


def build_template(
    meshes: list[TriMesh],
    initial_index: int = 0,
    iterations: int = 3,
    config: RegistrationConfig = RegistrationConfig(),
    rms_limit: float = 10.0,
) -> TriMesh:
    """Iterative mean-shape template from pairwise surface registration.

    Each round registers the current source to every mesh, Procrustes-aligns
    the corresponded outputs and replaces the source by their mean (source
    connectivity). Targets whose registration exceeds ``rms_limit`` are
    excluded from that round's mean and logged.
    """
    if len(meshes) < 2:
        raise PreconditionError("need at least 2 meshes")
    source = meshes[initial_index]
    for round_idx in range(iterations):
        outputs = []
        for i, target in enumerate(meshes):
            result = register_surfaces(source, target, config)
            quality = max(result.rms_fit, result.rms_coverage)
            if quality > rms_limit:
                log.warning(
                    "template round %d: target %d excluded (rms %.2f mm)",
                    round_idx, i, quality,
                )
                continue
            outputs.append(as_shape_vector(result.corresponded))
        if len(outputs) < 2:
            raise PreconditionError("template building lost all targets")
        _, mean = procrustes_align(outputs)
        # the aligned mean is origin-centered; keep the template anchored in
        # the source's frame so the next round's ICP starts nearby
        anchor = source.vertices.mean(axis=0)
        mean = (mean.reshape(-1, 3) + anchor).reshape(-1)
        source = shape_to_mesh(mean, source.triangles)
    return source


# -- PCA model -----------------------------------------------------------------


@dataclass(frozen=True)
class SsmModel:
    """Mean shape + PCA loadings over a shared triangulation."""

    mean: np.ndarray
    loadings: np.ndarray  # (3n, t), orthonormal columns
    eigenvalues: np.ndarray  # (t,), descending
    spectrum: np.ndarray  # full eigenvalue spectrum, descending
    connectivity: np.ndarray
    n_train: int

    @property
    def n_modes(self) -> int:
        return self.loadings.shape[1]

    def mean_mesh(self) -> TriMesh:
        return shape_to_mesh(self.mean, self.connectivity)


def build_ssm(shapes: list[np.ndarray], t: int, connectivity: np.ndarray) -> SsmModel:
    """PCA of the centered shape matrix via SVD.

    Keeps ``t`` modes; loading signs are fixed so each column's largest
    magnitude entry is positive.
    """
    data = np.asarray(shapes, dtype=np.float64)
    s = len(data)
    if s < 2:
        raise PreconditionError("need at least 2 shapes")
    if t > s - 1:
        raise PreconditionError("t must be at most n_shapes - 1")
    mean = data.mean(axis=0)
    centered = (data - mean).T  # (3n, s)
    u, sv, _ = np.linalg.svd(centered, full_matrices=False)
    eigenvalues = sv**2 / (s - 1)
    # sign convention for reproducible modes
    for j in range(u.shape[1]):
        k = np.argmax(np.abs(u[:, j]))
        if u[k, j] < 0:
            u[:, j] = -u[:, j]
    return SsmModel(
        mean=mean,
        loadings=u[:, :t].copy(),
        eigenvalues=eigenvalues[:t].copy(),
        spectrum=eigenvalues,
        connectivity=np.asarray(connectivity, dtype=np.int64),
        n_train=s,
    )


def synthesize(model: SsmModel, b: np.ndarray) -> np.ndarray:
    """Shape vector mean + loadings @ b."""
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if len(b) != model.n_modes:
        raise PreconditionError("coefficient length must equal the mode count")
    return model.mean + model.loadings @ b


def project(model: SsmModel, shape: np.ndarray) -> np.ndarray:
    """PCA coefficients of a shape: loadings^T (shape - mean)."""
    shape = np.asarray(shape, dtype=np.float64).reshape(-1)
    if shape.shape != model.mean.shape:
        raise PreconditionError("shape size mismatch")
    return model.loadings.T @ (shape - model.mean)


def explained_variance(model: SsmModel) -> np.ndarray:
    """Per-mode fraction of total variance for the retained modes."""
    total = model.spectrum.sum()
    if total == 0:
        out = np.zeros(model.n_modes)
        if model.n_modes:
            out[0] = 1.0
        return out
    return model.eigenvalues / total


def filter_by_rms(pairs, threshold: float = 2.5):
    """Keep (registered, target) pairs with RMS surface distance below threshold.

    Returns (kept pairs, number excluded).
    """
    kept = []
    excluded = 0
    for registered, target in pairs:
        if rms_surface_distance(registered, target) < threshold:
            kept.append((registered, target))
        else:
            excluded += 1
    if excluded:
        log.info("filter_by_rms: excluded %d of %d pairs", excluded, len(pairs))
    return kept, excluded
