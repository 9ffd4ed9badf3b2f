"""SDF-centric 3D shape processing: grids, meshes, registration, shape models."""

__version__ = "0.1.0"

from .errors import NumericalError, PreconditionError
from .grid import (
    DEFAULT_TRUNCATION_MM,
    VoxelGrid,
    center_of_largest_component,
    resample_trilinear,
    roi_crop,
    threshold_to_labelmap,
    wmse_loss,
)
from .isosurface import laplacian_smooth, largest_surface_component, marching_cubes
from .mesh import TriMesh
from .phantom import (
    CapsuleChain,
    Lobe,
    PopulationSpec,
    analytic_sdf,
    chain_to_mesh,
    make_hourglass,
    sample_population,
)
from .sdf import mesh_to_sdf
from .surfquery import SurfaceLocator
from .decoupling import (
    Plane,
    cross_section_area,
    cut_mesh,
    derive_landmarks,
    fit_plane_svd,
    optimize_cut_plane,
)
from .gmm import GmmModel, fit_gmm, log_likelihood, select_clusters_cv
from .registration import (
    LandmarkSet,
    RegistrationConfig,
    SimilarityTransform,
    apply_field,
    bspline_register,
    icp_similarity,
    project_correspondence,
    register_surfaces,
    rms_surface_distance,
)
from .ssm import (
    SsmModel,
    build_ssm,
    build_template,
    explained_variance,
    filter_by_rms,
    procrustes_align,
    project,
    synthesize,
)

__all__ = [
    "DEFAULT_TRUNCATION_MM",
    "CapsuleChain",
    "GmmModel",
    "LandmarkSet",
    "Lobe",
    "NumericalError",
    "Plane",
    "PopulationSpec",
    "PreconditionError",
    "RegistrationConfig",
    "SimilarityTransform",
    "SsmModel",
    "SurfaceLocator",
    "TriMesh",
    "VoxelGrid",
    "analytic_sdf",
    "apply_field",
    "bspline_register",
    "build_ssm",
    "build_template",
    "center_of_largest_component",
    "chain_to_mesh",
    "cross_section_area",
    "cut_mesh",
    "derive_landmarks",
    "explained_variance",
    "filter_by_rms",
    "fit_gmm",
    "fit_plane_svd",
    "icp_similarity",
    "laplacian_smooth",
    "largest_surface_component",
    "log_likelihood",
    "make_hourglass",
    "marching_cubes",
    "mesh_to_sdf",
    "optimize_cut_plane",
    "procrustes_align",
    "project",
    "project_correspondence",
    "register_surfaces",
    "resample_trilinear",
    "rms_surface_distance",
    "roi_crop",
    "select_clusters_cv",
    "synthesize",
    "threshold_to_labelmap",
    "wmse_loss",
]
