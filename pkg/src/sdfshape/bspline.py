"""Multi-level cubic B-spline free-form deformation fields.

A field is an ordered list of control grids, coarse to fine, each level's
control spacing half the previous. The displacement at a point is the sum
over levels of the tensor-product cubic B-spline interpolant of that level's
control-point displacements. Values, first and second spatial derivatives are
all evaluated analytically from the basis polynomials.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError

# unique unordered second-derivative pairs and their multiplicity in the
# bending energy sum over ordered pairs
HESSIAN_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
HESSIAN_MULTIPLICITY = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])


def bspline_basis(t: np.ndarray) -> np.ndarray:
    """Cubic B-spline basis values B_0..B_3 at local coordinate t in [0,1)."""
    t2 = t * t
    t3 = t2 * t
    return np.stack(
        [
            (1 - t) ** 3 / 6.0,
            (3 * t3 - 6 * t2 + 4) / 6.0,
            (-3 * t3 + 3 * t2 + 3 * t + 1) / 6.0,
            t3 / 6.0,
        ],
        axis=-1,
    )


def bspline_basis_d1(t: np.ndarray) -> np.ndarray:
    t2 = t * t
    return np.stack(
        [
            -((1 - t) ** 2) / 2.0,
            (3 * t2 - 4 * t) / 2.0,
            (-3 * t2 + 2 * t + 1) / 2.0,
            t2 / 2.0,
        ],
        axis=-1,
    )


def bspline_basis_d2(t: np.ndarray) -> np.ndarray:
    return np.stack([1 - t, 3 * t - 2, -3 * t + 1, t], axis=-1)


@dataclass
class ControlGrid:
    """One resolution level: a lattice of 3D control-point displacements."""

    origin: np.ndarray
    spacing: np.ndarray
    coeffs: np.ndarray  # (nx, ny, nz, 3) displacements, mm

    @classmethod
    def covering(cls, lo, hi, spacing) -> "ControlGrid":
        """Zero grid whose cubic support covers [lo, hi] with one margin."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), 3).copy()
        origin = lo - spacing
        dims = np.ceil((hi - origin) / spacing).astype(int) + 3
        return cls(origin, spacing, np.zeros((*dims, 3)))

    @property
    def dims(self):
        return self.coeffs.shape[:3]

    def _locate(self, pts: np.ndarray):
        """Cell index and local coordinate per point; errors outside support."""
        u = (np.atleast_2d(pts) - self.origin) / self.spacing
        dims = np.array(self.dims)
        eps = 1e-9
        if (u < 1.0 - eps).any() or (u > dims - 2.0 + eps).any():
            raise PreconditionError("point outside B-spline field support")
        cell = np.clip(np.floor(u).astype(np.int64), 1, dims - 3)
        return cell, u - cell

    def _stencil(self, cell: np.ndarray):
        """Flat coefficient indices of the 4x4x4 stencil, shape (n, 64)."""
        nx, ny, nz = self.dims
        off = np.arange(-1, 3)
        gx = cell[:, 0:1] + off  # (n, 4)
        gy = cell[:, 1:2] + off
        gz = cell[:, 2:3] + off
        flat = (gx[:, :, None, None] * ny + gy[:, None, :, None]) * nz + gz[:, None, None, :]
        return flat.reshape(len(cell), 64)

    def _weights(self, t: np.ndarray, dx: int = 0, dy: int = 0, dz: int = 0):
        """Tensor-product weights, optionally differentiated per axis."""
        tables = (bspline_basis, bspline_basis_d1, bspline_basis_d2)
        wx = tables[dx](t[:, 0]) / self.spacing[0] ** dx
        wy = tables[dy](t[:, 1]) / self.spacing[1] ** dy
        wz = tables[dz](t[:, 2]) / self.spacing[2] ** dz
        w = wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]
        return w.reshape(len(t), 64)

    def displacement(self, pts: np.ndarray) -> np.ndarray:
        cell, t = self._locate(pts)
        w = self._weights(t)
        flat = self.coeffs.reshape(-1, 3)
        return np.einsum("nk,nkc->nc", w, flat[self._stencil(cell)])

    def hessian_rows(self, pts: np.ndarray) -> np.ndarray:
        """Second derivatives d2 d_c / (da db) for the six unique pairs.

        Returns (n, 6, 3): pair-major (xx, yy, zz, xy, xz, yz) per component.
        """
        cell, t = self._locate(pts)
        flat = self.coeffs.reshape(-1, 3)
        gathered = flat[self._stencil(cell)]  # (n, 64, 3)
        out = np.empty((len(pts), len(HESSIAN_PAIRS), 3))
        for k, (a, b) in enumerate(HESSIAN_PAIRS):
            d = [0, 0, 0]
            d[a] += 1
            d[b] += 1
            w = self._weights(t, *d)
            out[:, k, :] = np.einsum("nk,nkc->nc", w, gathered)
        return out


@dataclass
class BSplineField:
    """Sum of cubic B-spline displacement levels, coarse to fine."""

    levels: list[ControlGrid]

    @classmethod
    def covering(cls, lo, hi, n_levels: int = 5, finest_spacing: float = 8.0) -> "BSplineField":
        """Zero multi-level field over [lo, hi]; spacing halves per level."""
        if n_levels < 1:
            raise PreconditionError("need at least one level")
        spacings = [finest_spacing * 2 ** (n_levels - 1 - i) for i in range(n_levels)]
        return cls([ControlGrid.covering(lo, hi, s) for s in spacings])

    def displacement(self, pts: np.ndarray, up_to_level: int | None = None) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        out = np.zeros_like(pts)
        levels = self.levels if up_to_level is None else self.levels[:up_to_level]
        for grid in levels:
            out += grid.displacement(pts)
        return out

    def hessian_rows(self, pts: np.ndarray, up_to_level: int | None = None) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        out = np.zeros((len(pts), len(HESSIAN_PAIRS), 3))
        levels = self.levels if up_to_level is None else self.levels[:up_to_level]
        for grid in levels:
            out += grid.hessian_rows(pts)
        return out

    def max_displacement(self, pts: np.ndarray) -> float:
        return float(np.linalg.norm(self.displacement(pts), axis=1).max())


def bending_energy_of_rows(rows: np.ndarray) -> float:
    """Mean over samples of sum_{a,b,c} (d2 d_c/da db)^2 from hessian rows."""
    per_sample = np.einsum("npc,p->n", rows**2, HESSIAN_MULTIPLICITY)
    return float(per_sample.mean())
