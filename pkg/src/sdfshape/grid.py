"""Regular voxel grids and the scalar-field operations built on them.

A grid stores values at voxel centers; ``origin`` is the world position (mm)
of the center of voxel (0, 0, 0). Arrays are indexed ``values[ix, iy, iz]``.
Out-of-domain samples clamp to the nearest boundary value, which is exact for
truncated SDFs (constant +/-trunc far from the surface).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import PreconditionError

DEFAULT_TRUNCATION_MM = 5.0

GRID_KINDS = ("SDF", "LABEL", "PROB")


@dataclass(frozen=True)
class VoxelGrid:
    """Immutable regular 3D scalar grid with physical spacing and origin.

    Parameters
    ----------
    values : (nx, ny, nz) array
        Scalar samples at voxel centers.
    spacing : (3,) float array
        Voxel size in mm along x, y, z.
    origin : (3,) float array
        World position (mm) of the center of voxel (0, 0, 0).
    kind : str
        One of ``SDF``, ``LABEL``, ``PROB``.
    """

    values: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray
    kind: str = "SDF"

    def __post_init__(self):
        v = np.array(self.values, order="C")
        if v.ndim != 3:
            raise PreconditionError("values must be a 3D array")
        spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if (spacing <= 0).any():
            raise PreconditionError("spacing components must be positive")
        if self.kind not in GRID_KINDS:
            raise PreconditionError(f"unknown grid kind {self.kind!r}")
        if self.kind == "LABEL":
            if not np.isin(np.unique(v), [0, 1]).all():
                raise PreconditionError("LABEL grid values must be 0 or 1")
            v = v.astype(np.uint8)
        else:
            v = v.astype(np.float64)
        v.flags.writeable = False
        spacing.flags.writeable = False
        origin.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def index_to_world(self, idx: np.ndarray) -> np.ndarray:
        """Voxel (possibly fractional) index -> world mm."""
        return np.asarray(idx, dtype=np.float64) * self.spacing + self.origin

    def world_to_index(self, pts: np.ndarray) -> np.ndarray:
        """World mm -> fractional voxel index."""
        return (np.asarray(pts, dtype=np.float64) - self.origin) / self.spacing

    def voxel_centers(self) -> np.ndarray:
        """(nx*ny*nz, 3) world coordinates of all voxel centers, x fastest."""
        nx, ny, nz = self.dims
        ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        idx = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3, order="C")
        return self.index_to_world(idx)

    def sample(self, pts: np.ndarray) -> np.ndarray:
        """Trilinear interpolation at world points, clamped at the boundary."""
        return _interp_trilinear(self.values.astype(np.float64), self.world_to_index(pts))

    def sample_with_gradient(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Trilinear values and their analytic world-space gradients."""
        vals, grad_idx = _interp_trilinear(
            self.values.astype(np.float64), self.world_to_index(pts), gradient=True
        )
        return vals, grad_idx / self.spacing


def _interp_trilinear(values: np.ndarray, idx: np.ndarray, gradient: bool = False):
    """Trilinear interpolation at fractional indices with boundary clamping.

    The gradient (per index unit) is the analytic derivative of the
    interpolant; outside the domain it is zero in the clamped directions.
    """
    idx = np.atleast_2d(np.asarray(idx, dtype=np.float64))
    shape = np.array(values.shape)
    pos = np.clip(idx, 0.0, shape - 1.0)
    i0 = np.minimum(pos.astype(np.int64), shape - 2).clip(0)
    t = pos - i0
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]

    c = np.empty((len(idx), 2, 2, 2))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                c[:, dx, dy, dz] = values[ix + dx, iy + dy, iz + dz]

    c00 = c[:, 0, 0, 0] * (1 - tz) + c[:, 0, 0, 1] * tz
    c01 = c[:, 0, 1, 0] * (1 - tz) + c[:, 0, 1, 1] * tz
    c10 = c[:, 1, 0, 0] * (1 - tz) + c[:, 1, 0, 1] * tz
    c11 = c[:, 1, 1, 0] * (1 - tz) + c[:, 1, 1, 1] * tz
    c0 = c00 * (1 - ty) + c01 * ty
    c1 = c10 * (1 - ty) + c11 * ty
    out = c0 * (1 - tx) + c1 * tx
    if not gradient:
        return out

    gx = c1 - c0
    gy = (c01 - c00) * (1 - tx) + (c11 - c10) * tx
    gz0 = (c[:, 0, 0, 1] - c[:, 0, 0, 0]) * (1 - ty) + (c[:, 0, 1, 1] - c[:, 0, 1, 0]) * ty
    gz1 = (c[:, 1, 0, 1] - c[:, 1, 0, 0]) * (1 - ty) + (c[:, 1, 1, 1] - c[:, 1, 1, 0]) * ty
    gz = gz0 * (1 - tx) + gz1 * tx
    grad = np.stack([gx, gy, gz], axis=1)
    grad[(idx < 0.0) | (idx > shape - 1.0)] = 0.0
    return out, grad


def wmse_loss(y: VoxelGrid, yhat: VoxelGrid, lam: float = 0.001) -> float:
    """Mean squared error weighted by 1/(|y| + lam).

    The weighting concentrates the loss near the zero level set; ``lam``
    keeps it finite on the surface itself.
    """
    if y.dims != yhat.dims:
        raise PreconditionError("voxel grids have mismatched dims")
    if lam <= 0:
        raise PreconditionError("lam must be positive")
    a = y.values.astype(np.float64)
    b = yhat.values.astype(np.float64)
    return float(np.mean(np.abs(a - b) ** 2 / (np.abs(a) + lam)))


def resample_trilinear(
    grid: VoxelGrid,
    target_dims,
    target_spacing,
    target_origin,
) -> VoxelGrid:
    """Resample onto a new geometry by trilinear interpolation at voxel centers."""
    target_dims = tuple(int(d) for d in target_dims)
    if any(d < 1 for d in target_dims):
        raise PreconditionError("target dims must be positive")
    spacing = np.asarray(target_spacing, dtype=np.float64).reshape(3)
    if (spacing <= 0).any():
        raise PreconditionError("target spacing must be positive")
    origin = np.asarray(target_origin, dtype=np.float64).reshape(3)

    nx, ny, nz = target_dims
    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    pts = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3) * spacing + origin
    vals = grid.sample(pts).reshape(target_dims)
    kind = grid.kind if grid.kind != "LABEL" else "PROB"
    return VoxelGrid(vals, spacing, origin, kind=kind)


def threshold_to_labelmap(sdf: VoxelGrid, target_dims, target_spacing) -> VoxelGrid:
    """Trilinearly upsample an SDF and threshold it at zero (inside = 1)."""
    if sdf.kind != "SDF":
        raise PreconditionError("threshold_to_labelmap expects an SDF grid")
    resampled = resample_trilinear(sdf, target_dims, target_spacing, sdf.origin)
    return VoxelGrid(
        (resampled.values < 0).astype(np.uint8), resampled.spacing, resampled.origin,
        kind="LABEL",
    )


def roi_crop(grid: VoxelGrid, center, side: float = 140.0, out_dims=(64, 64, 64)) -> VoxelGrid:
    """Crop an axis-aligned physical cube and resample it isotropically.

    The cube of side length ``side`` mm is centered at ``center``; output
    voxel size is ``side / out_dims`` per axis, voxel centers lie inside the
    cube. Regions outside the source take the nearest boundary value.
    """
    if side <= 0:
        raise PreconditionError("side must be positive")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    out_dims = tuple(int(d) for d in out_dims)
    spacing = np.array([side / d for d in out_dims])
    origin = center - side / 2.0 + spacing / 2.0
    return resample_trilinear(grid, out_dims, spacing, origin)


def center_of_largest_component(label: VoxelGrid) -> np.ndarray:
    """Mean world position of the largest 26-connected foreground component."""
    if label.kind != "LABEL":
        raise PreconditionError("expects a LABEL grid")
    fg = label.values > 0
    if not fg.any():
        raise PreconditionError("empty foreground")
    structure = np.ones((3, 3, 3), dtype=bool)
    labels, n = ndimage.label(fg, structure=structure)
    counts = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(counts)) + 1  # argmax keeps the lowest label on ties
    idx = np.argwhere(labels == best)
    return label.index_to_world(idx).mean(axis=0)
