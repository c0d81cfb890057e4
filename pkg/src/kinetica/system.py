"""Tomographic system model: parallel-beam projector, sensitivity, Poisson log-likelihood.

The projector is a Joseph-style interpolating ray tracer materialized once as a
sparse matrix; back projection is its stored transpose, so the pair is matched
(adjoint) to machine precision by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .core import DynamicImage, FrameSchedule, ImageGrid, ValidationError, frame_durations


class NumericalError(RuntimeError):
    """Raised when a likelihood or update becomes undefined (e.g. 0 expectation, data > 0)."""


@dataclass(frozen=True)
class ParallelGeometry:
    """Parallel-beam sampling: n_angles over [0, pi), n_bins detector bins of bin_size mm."""

    n_angles: int
    n_bins: int
    bin_size: float

    def __post_init__(self):
        if self.n_angles < 1 or self.n_bins < 1 or self.bin_size <= 0:
            raise ValidationError(f"bad geometry {self}")

    def n_rays(self, grid: ImageGrid) -> int:
        return self.n_angles * self.n_bins * grid.dims[2]


def joseph_system_matrix(geometry: ParallelGeometry, grid: ImageGrid) -> sp.csr_matrix:
    """Build the in-plane interpolating projector for one slice, replicated over z.

    Rows are rays ordered (angle, bin, z); columns are voxels in grid order.
    Entries are intersection-weighted interpolation coefficients in mm.
    """
    nx, ny, nz = grid.dims
    vx, vy = grid.voxel_size[0], grid.voxel_size[1]
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
    u = (np.arange(geometry.n_bins) - (geometry.n_bins - 1) / 2.0) * geometry.bin_size

    rows, cols, vals = [], [], []
    for a in range(geometry.n_angles):
        phi = a * np.pi / geometry.n_angles
        c, s = np.cos(phi), np.sin(phi)
        if abs(c) >= abs(s):
            # x-dominant: one interpolated sample per image column
            x_c = (np.arange(nx) - cx) * vx
            y = (u[:, None] + x_c[None, :] * s) / c
            fy = y / vy + cy
            iy0 = np.floor(fy).astype(np.int64)
            w = fy - iy0
            step = vx / abs(c)
            jx = np.broadcast_to(np.arange(nx)[None, :], fy.shape)
            for iy, wgt in ((iy0, 1.0 - w), (iy0 + 1, w)):
                ok = (iy >= 0) & (iy < ny) & (wgt > 0)
                rows.append((a * geometry.n_bins + np.nonzero(ok)[0]))
                cols.append(jx[ok] * ny + iy[ok])
                vals.append(wgt[ok] * step)
        else:
            # y-dominant: one interpolated sample per image row
            y_c = (np.arange(ny) - cy) * vy
            x = (y_c[None, :] * c - u[:, None]) / s
            fx = x / vx + cx
            ix0 = np.floor(fx).astype(np.int64)
            w = fx - ix0
            step = vy / abs(s)
            jy = np.broadcast_to(np.arange(ny)[None, :], fx.shape)
            for ix, wgt in ((ix0, 1.0 - w), (ix0 + 1, w)):
                ok = (ix >= 0) & (ix < nx) & (wgt > 0)
                rows.append((a * geometry.n_bins + np.nonzero(ok)[0]))
                cols.append(ix[ok] * ny + jy[ok])
                vals.append(wgt[ok] * step)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    m2 = geometry.n_angles * geometry.n_bins
    p2 = sp.coo_matrix((vals, (rows, cols)), shape=(m2, nx * ny)).tocsr()
    if nz == 1:
        return p2
    return sp.kron(p2, sp.identity(nz, format="csr"), format="csr")


def attenuation_factors(geometry: ParallelGeometry, grid: ImageGrid,
                        mu_map: np.ndarray) -> np.ndarray:
    """Per-ray survival exp(-integral of mu) for a mu map in 1/mm on the grid."""
    mu = np.asarray(mu_map, dtype=np.float64).reshape(-1)
    if mu.shape[0] != grid.n_voxels:
        raise ValidationError("mu map does not match grid")
    line_integrals = joseph_system_matrix(geometry, grid) @ mu
    return np.exp(-line_integrals)


def frame_decay_factors(schedule: FrameSchedule, half_life_s: float | None) -> np.ndarray:
    """Mean physical-decay factor over each frame; ones when half_life is None."""
    if half_life_s is None:
        return np.ones(len(schedule))
    lam = np.log(2.0) / float(half_life_s)
    a, b = schedule.start_times, schedule.end_times
    return (np.exp(-lam * a) - np.exp(-lam * b)) / (lam * (b - a))


class SystemModel:
    """Projection operator with attenuation and per-frame scale factors folded in."""

    def __init__(self, geometry: ParallelGeometry, grid: ImageGrid,
                 attenuation: np.ndarray | None = None,
                 frame_factors: np.ndarray | None = None):
        self.geometry = geometry
        self.grid = grid
        m = geometry.n_rays(grid)
        if attenuation is None:
            attenuation = np.ones(m)
        attenuation = np.asarray(attenuation, dtype=np.float64).reshape(-1)
        if attenuation.shape[0] != m:
            raise ValidationError(f"attenuation has {attenuation.shape[0]} rays, geometry {m}")
        if np.any(attenuation <= 0) or np.any(attenuation > 1):
            raise ValidationError("attenuation factors must lie in (0, 1]")
        self.attenuation = attenuation
        self.frame_factors = (np.ones(1) if frame_factors is None
                              else np.asarray(frame_factors, dtype=np.float64).reshape(-1))
        if np.any(self.frame_factors <= 0):
            raise ValidationError("frame factors must be positive")
        p_geom = joseph_system_matrix(geometry, grid)
        self.projector = sp.diags(attenuation) @ p_geom
        self.projector = self.projector.tocsr()
        self.projector_t = self.projector.T.tocsr()
        self._sens = self.projector_t @ np.ones(m)

    @property
    def n_rays(self) -> int:
        return self.projector.shape[0]

    def _frame_factors(self, n_frames: int) -> np.ndarray:
        if self.frame_factors.shape[0] == n_frames:
            return self.frame_factors
        if self.frame_factors.shape[0] == 1:
            return np.full(n_frames, self.frame_factors[0])
        raise ValidationError(
            f"{n_frames} frames vs {self.frame_factors.shape[0]} frame factors")

    def _as_matrix(self, x) -> np.ndarray:
        if isinstance(x, DynamicImage):
            if x.grid.dims != self.grid.dims:
                raise ValidationError(f"grid mismatch {x.grid.dims} vs {self.grid.dims}")
            x = x.data
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] != self.grid.n_voxels:
            raise ValidationError(f"{x.shape[0]} voxels vs grid {self.grid.n_voxels}")
        return x

    def forward(self, x) -> np.ndarray:
        """Expected projections without randoms: per frame, frame_factor * (P x)."""
        x = self._as_matrix(x)
        return (self.projector @ x) * self._frame_factors(x.shape[1])[None, :]

    def backward(self, g: np.ndarray) -> np.ndarray:
        """Exact adjoint of forward."""
        g = np.asarray(g, dtype=np.float64)
        if g.ndim == 1:
            g = g[:, None]
        if g.shape[0] != self.n_rays:
            raise ValidationError(f"{g.shape[0]} rays vs geometry {self.n_rays}")
        return (self.projector_t @ g) * self._frame_factors(g.shape[1])[None, :]

    def sensitivity_image(self) -> np.ndarray:
        """Per-voxel column sums of the projector (unit frame factor)."""
        return self._sens.copy()

    def frame_sensitivity(self, n_frames: int) -> np.ndarray:
        """N x T sensitivity including frame factors; equals backward(all-ones)."""
        return self._sens[:, None] * self._frame_factors(n_frames)[None, :]

    def log_likelihood(self, randoms: np.ndarray, y: np.ndarray, x) -> float:
        """Poisson log-likelihood sum(y log ybar - ybar) with the 0 log 0 = 0 convention."""
        ybar = self.forward(x) + np.asarray(randoms, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if y.shape != ybar.shape:
            raise ValidationError(f"data shape {y.shape} vs expectation {ybar.shape}")
        dead = ybar <= 0
        if np.any(y[dead] > 0):
            raise NumericalError("measured counts in a bin with zero expectation")
        live = ~dead
        return float(np.sum(y[live] * np.log(ybar[live]) - ybar[live]))


def default_frame_factors(schedule: FrameSchedule, half_life_s: float | None,
                          include_duration: bool = False) -> np.ndarray:
    """Decay (and optionally duration) factors for a schedule, for SystemModel."""
    f = frame_decay_factors(schedule, half_life_s)
    if include_duration:
        f = f * frame_durations(schedule)
    return f
