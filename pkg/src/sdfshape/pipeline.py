"""End-to-end cohort processing: template, correspondence, decoupling, clusters.

Mirrors the full shape-analysis chain on a population of surfaces: build a
mean template by iterative registration, register it to every subject,
transfer the neck points through the correspondence, cut the appendage by
the optimal plane, refine correspondence on the decoupled parts with
landmark regularization, then run PCA and mixture-model cluster discovery
on the loadings.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .decoupling import (
    DecoupledAppendage,
    cut_mesh,
    derive_landmarks,
    fit_plane_svd,
    optimize_cut_plane,
)
from .errors import PreconditionError
from .gmm import fit_gmm, log_likelihood, select_clusters_cv
from .mesh import TriMesh
from .registration import RegistrationConfig, register_surfaces
from .ssm import (
    SsmModel,
    as_shape_vector,
    build_ssm,
    build_template,
    procrustes_align,
    project,
)

log = logging.getLogger(__name__)


def seed_for(root_seed: int, label: str) -> int:
    """Deterministic per-stage seed: blake2b of "<root>:<label>"."""
    digest = hashlib.blake2b(f"{root_seed}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class PipelineConfig:
    """Whole-pipeline knobs; one root seed feeds every stage via seed_for."""

    seed: int = 0
    trunc: float = 5.0
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    refine: RegistrationConfig | None = None
    template_iterations: int = 3
    template_subset: int = 10
    n_modes: int = 5
    k_max: int = 5
    gmm_restarts: int = 10
    cv_restarts: int = 10
    rms_threshold: float = 2.5
    cut_trials: int = 200
    cut_angle_sigma_deg: float = 5.0
    cut_shift_sigma_mm: float = 1.0
    neck_band_mm: float = 2.0

    def __post_init__(self):
        if self.refine is None:
            self.refine = self.registration
        if self.n_modes < 1 or self.k_max < 1:
            raise PreconditionError("n_modes and k_max must be positive")


def neck_vertex_indices(mesh: TriMesh, neck_point: np.ndarray, axis: np.ndarray,
                        band_mm: float = 2.0) -> np.ndarray:
    """Vertices of the ring around a known neck position along an axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    along = (mesh.vertices - neck_point) @ axis
    ring = np.flatnonzero(np.abs(along) < band_mm)
    if len(ring) < 3:
        raise PreconditionError("no vertices near the neck position")
    return ring


@dataclass
class CohortResult:
    template: TriMesh
    template_appendage: DecoupledAppendage
    corresponded: list[TriMesh]
    appendages: list[DecoupledAppendage]
    refined: list[TriMesh]
    kept_index: np.ndarray
    excluded: int
    model: SsmModel
    loadings: np.ndarray
    k_star: int
    mean_test_llh: np.ndarray
    assignments: np.ndarray


def decouple_with_neck(
    mesh: TriMesh,
    neck_points: np.ndarray,
    appendage_reference: np.ndarray,
    config: PipelineConfig,
    seed: int,
) -> DecoupledAppendage:
    """Fit, refine and apply the cutting plane for one subject.

    The plane normal is oriented toward the appendage side using a
    reference point known to lie on it (the transferred template tip).
    """
    centroid = mesh.centroid()
    plane = fit_plane_svd(neck_points, away_from=centroid)
    if plane.signed_distance(appendage_reference[None])[0] < 0:
        plane = replace_normal(plane, -plane.normal)
    plane = optimize_cut_plane(
        mesh,
        plane,
        n_trials=config.cut_trials,
        angle_sigma_deg=config.cut_angle_sigma_deg,
        shift_sigma_mm=config.cut_shift_sigma_mm,
        seed=seed,
    )
    if plane.signed_distance(appendage_reference[None])[0] < 0:
        plane = replace_normal(plane, -plane.normal)
    return cut_mesh(mesh, plane)


def replace_normal(plane, normal):
    from .decoupling import Plane

    return Plane(np.asarray(normal) / np.linalg.norm(normal), plane.point)


def run_cohort(
    meshes: list[TriMesh],
    config: PipelineConfig,
    template_neck: np.ndarray | None = None,
    template_axis: np.ndarray | None = None,
    initial_index: int = 0,
) -> CohortResult:
    """Template + correspondence + decoupling + PCA + cluster discovery.

    ``template_neck``/``template_axis`` locate the neck ring on the initial
    source mesh (canonical pose); the ring indices ride through template
    building and are transferred to each subject by correspondence.
    """
    if len(meshes) < 3:
        raise PreconditionError("cohort needs at least 3 meshes")
    if template_neck is None or template_axis is None:
        raise PreconditionError("neck position and axis on the initial source required")

    n_subset = max(2, min(config.template_subset, len(meshes)))
    subset_idx = np.unique(np.round(np.linspace(0, len(meshes) - 1, n_subset)).astype(int))
    subset = [meshes[i] for i in subset_idx]
    init_in_subset = int(np.argmin(np.abs(subset_idx - initial_index)))

    # the template inherits the initial source's connectivity, so the neck
    # ring and tip are pinned as vertex indices of that mesh
    source = subset[init_in_subset]
    neck_idx = neck_vertex_indices(source, template_neck, template_axis, config.neck_band_mm)
    tip_idx = int(np.argmax((source.vertices - template_neck) @ template_axis))

    log.info("building template from %d meshes, %d iterations",
             len(subset), config.template_iterations)
    template = build_template(
        subset, initial_index=init_in_subset, iterations=config.template_iterations,
        config=replace_seed(config.registration, seed_for(config.seed, "template")),
    )

    log.info("registering template to %d subjects", len(meshes))
    corresponded = []
    for i, target in enumerate(meshes):
        res = register_surfaces(
            template, target,
            replace_seed(config.registration, seed_for(config.seed, f"register:{i}")),
        )
        corresponded.append(res.corresponded)
        log.info("subject %d: fit rms %.2f mm, coverage rms %.2f mm",
                 i, res.rms_fit, res.rms_coverage)

    log.info("decoupling appendages")
    template_app = decouple_with_neck(
        template, template.vertices[neck_idx], template.vertices[tip_idx],
        config, seed_for(config.seed, "cut:template"),
    )
    appendages = []
    for i, (target, corr) in enumerate(zip(meshes, corresponded)):
        appendages.append(
            decouple_with_neck(
                target, corr.vertices[neck_idx], corr.vertices[tip_idx],
                config, seed_for(config.seed, f"cut:{i}"),
            )
        )

    log.info("refining correspondence on decoupled appendages")
    from .mesh import cap_boundaries

    template_lms = derive_landmarks(template_app)
    template_capped = cap_boundaries(template_app.mesh)
    refined = []
    rms_pairs = []
    for i, app in enumerate(appendages):
        target_lms = derive_landmarks(app)
        res = register_surfaces(
            template_app.mesh, app.mesh,
            replace_seed(config.refine, seed_for(config.seed, f"refine:{i}")),
            source_lms=template_lms, target_lms=target_lms,
            closed_source=template_capped, closed_target=cap_boundaries(app.mesh),
        )
        refined.append(res.corresponded)
        # both directions: fit (correspondence to target) misses collapsed
        # patches, coverage (target to correspondence) catches them
        rms_pairs.append(max(res.rms_fit, res.rms_coverage))
        log.info("appendage %d: fit rms %.2f mm, coverage rms %.2f mm",
                 i, res.rms_fit, res.rms_coverage)

    kept_index = np.flatnonzero(np.array(rms_pairs) < config.rms_threshold)
    excluded = len(refined) - len(kept_index)
    if excluded:
        log.info("excluding %d subjects above %.1f mm rms", excluded, config.rms_threshold)
    if len(kept_index) < config.k_max + 1:
        raise PreconditionError("too few subjects survive the rms filter")

    vectors = [as_shape_vector(refined[i]) for i in kept_index]
    aligned, _ = procrustes_align(vectors)
    n_modes = min(config.n_modes, len(aligned) - 1)
    model = build_ssm(aligned, t=n_modes, connectivity=template_app.mesh.triangles)
    loadings = np.array([project(model, v) for v in aligned])

    log.info("selecting cluster count up to %d", config.k_max)
    k_star, mean_llh = select_clusters_cv(
        loadings, config.k_max, seed=seed_for(config.seed, "cv"),
        restarts=config.cv_restarts,
    )
    gmm = fit_gmm(loadings, k_star, seed=seed_for(config.seed, "gmm"),
                  restarts=config.gmm_restarts)
    assignments = gmm_assign(gmm, loadings)
    return CohortResult(
        template=template,
        template_appendage=template_app,
        corresponded=corresponded,
        appendages=appendages,
        refined=refined,
        kept_index=kept_index,
        excluded=excluded,
        model=model,
        loadings=loadings,
        k_star=k_star,
        mean_test_llh=mean_llh,
        assignments=assignments,
    )


def replace_seed(config: RegistrationConfig, seed: int) -> RegistrationConfig:
    return replace(config, seed=seed)


def gmm_assign(gmm, data: np.ndarray) -> np.ndarray:
    """Hard component assignments by maximum posterior."""
    from .gmm import _log_gaussians

    logp = _log_gaussians(np.atleast_2d(data), gmm.means, gmm.covariances)
    return np.argmax(logp + np.log(gmm.weights), axis=1)


def label_agreement(assignments: np.ndarray, labels: np.ndarray) -> float:
    """Agreement between cluster ids and reference labels.

    Uses the best label permutation when the cluster and label counts match,
    otherwise the best per-cluster majority mapping.
    """
    from itertools import permutations

    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    uniq_labels = list(np.unique(labels))
    ks = list(np.unique(assignments))
    if len(ks) == len(uniq_labels):
        best = 0.0
        for perm in permutations(uniq_labels):
            mapped = np.array([perm[ks.index(a)] for a in assignments])
            best = max(best, float((mapped == labels).mean()))
        return best
    correct = 0
    for k in ks:
        members = labels[assignments == k]
        counts = [int((members == lab).sum()) for lab in uniq_labels]
        correct += max(counts)
    return correct / len(labels)
