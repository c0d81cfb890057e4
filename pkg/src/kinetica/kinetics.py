"""Kinetic models: temporal bases, cumulative frame binning, and indirect graphical fits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .core import FrameSchedule, ParametricImage, ValidationError, frame_durations

MODEL_PATLAK = "patlak"
MODEL_RELOGAN = "relogan"


class SingularFitError(ValidationError):
    """Raised when a graphical fit has a rank-deficient design."""


@dataclass(frozen=True)
class SampledCurve:
    """Piecewise-linear curve sampled at strictly increasing times starting at 0."""

    times: np.ndarray
    values: np.ndarray

    def __init__(self, times, values):
        times = np.asarray(times, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if times.ndim != 1 or times.shape != values.shape:
            raise ValidationError("curve times/values must be matching 1-D arrays")
        if times.size < 2 or times[0] != 0.0 or np.any(np.diff(times) <= 0):
            raise ValidationError("curve times must strictly increase from 0")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValidationError("curve values must be finite and nonnegative")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __call__(self, t) -> np.ndarray:
        return np.interp(t, self.times, self.values)

    def require_coverage(self, t_end: float) -> None:
        if self.times[-1] < t_end - 1e-9:
            raise ValidationError(
                f"curve ends at {self.times[-1]} s but {t_end} s is required")

    @classmethod
    def from_csv(cls, path) -> "SampledCurve":
        data = np.loadtxt(path, delimiter=",", ndmin=2)
        return cls(data[:, 0], data[:, 1])

    def to_csv(self, path) -> None:
        np.savetxt(path, np.column_stack([self.times, self.values]), delimiter=",",
                   fmt="%.17g")


InputFunction = SampledCurve
ReferenceTac = SampledCurve


@dataclass(frozen=True)
class TemporalBasis:
    """T x 2 temporal matrix mapping kinetic channels to frame values."""

    matrix: np.ndarray
    model_tag: str

    def __init__(self, matrix, model_tag):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[1] != 2:
            raise ValidationError(f"basis must be T x 2, got {matrix.shape}")
        if model_tag not in (MODEL_PATLAK, MODEL_RELOGAN):
            raise ValidationError(f"unknown model tag {model_tag!r}")
        if model_tag == MODEL_PATLAK and np.any(matrix < 0):
            raise ValidationError("patlak basis must be nonnegative")
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "model_tag", model_tag)

    @property
    def n_frames(self) -> int:
        return self.matrix.shape[0]


def _union_grid(curve: SampledCurve, schedule: FrameSchedule) -> np.ndarray:
    edges = np.unique(np.concatenate([[0.0], schedule.start_times, schedule.end_times]))
    curve.require_coverage(edges[-1])
    grid = np.union1d(curve.times, edges)
    return grid[grid <= edges[-1] + 1e-12]


def _edge_lookup(grid: np.ndarray, t: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(grid, t)
    idx = np.clip(idx, 0, grid.size - 1)
    if np.any(np.abs(grid[idx] - t) > 1e-9):
        raise ValidationError("frame edge missing from the integration grid")
    return idx


def patlak_basis(cp: SampledCurve, schedule: FrameSchedule) -> TemporalBasis:
    """Rows [frame integral of the running input integral, frame integral of the input].

    Composite trapezoid on the union of input sample times and frame edges;
    exact at the first level for the piecewise-linear input model.
    """
    grid = _union_grid(cp, schedule)
    c = cp(grid)
    running = cumulative_trapezoid(c, grid, initial=0.0)
    double = cumulative_trapezoid(running, grid, initial=0.0)
    ia = _edge_lookup(grid, schedule.start_times)
    ib = _edge_lookup(grid, schedule.end_times)
    rows = np.column_stack([double[ib] - double[ia], running[ib] - running[ia]])
    return TemporalBasis(rows, MODEL_PATLAK)


def relogan_basis(cref: SampledCurve, schedule: FrameSchedule) -> TemporalBasis:
    """Rows [integral of the reference curve up to frame end, reference value at frame end]."""
    grid = _union_grid(cref, schedule)
    running = cumulative_trapezoid(cref(grid), grid, initial=0.0)
    ib = _edge_lookup(grid, schedule.end_times)
    rows = np.column_stack([running[ib], cref(schedule.end_times)])
    return TemporalBasis(rows, MODEL_RELOGAN)


def apply_kinetic(theta, basis: TemporalBasis) -> np.ndarray:
    """Frame values theta @ A^T for an N x 2 channel array (or ParametricImage)."""
    if isinstance(theta, ParametricImage):
        theta = theta.channels
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 2 or theta.shape[1] != 2:
        raise ValidationError(f"expected N x 2 channels, got {theta.shape}")
    return theta @ basis.matrix.T


def cumulative_bin(v: np.ndarray) -> np.ndarray:
    """Cumulative frame sums (right-multiplication by the upper-triangular ones matrix)."""
    return np.cumsum(np.asarray(v, dtype=np.float64), axis=-1)


def first_difference(v: np.ndarray) -> np.ndarray:
    """Inverse of cumulative_bin."""
    v = np.asarray(v, dtype=np.float64)
    return np.diff(v, axis=-1, prepend=0.0)


def rebin_schedule(full: FrameSchedule, t2_star: float):
    """Merge all frames up to t2_star into one; returns (schedule, merge map).

    t2_star must coincide with a frame boundary: counts are summed, never split.
    """
    if t2_star <= 0:
        return full, [[k] for k in range(len(full))]
    ends = full.end_times
    hits = np.nonzero(np.abs(ends - t2_star) <= 1e-9)[0]
    if hits.size == 0:
        raise ValidationError(f"t2*={t2_star} s is not a frame boundary")
    cut = int(hits[0])
    if full.frames[0][0] != 0.0:
        raise ValidationError("rebinning expects the schedule to start at 0")
    merged = [(0.0, float(ends[cut]))] + list(full.frames[cut + 1:])
    merge_map = [list(range(cut + 1))] + [[k] for k in range(cut + 1, len(full))]
    return FrameSchedule(merged, steady_index=0), merge_map


def rebin_counts(y: np.ndarray, merge_map) -> np.ndarray:
    """Sum sinogram (or image) frame columns according to a rebinning merge map."""
    y = np.asarray(y)
    out = np.empty(y.shape[:-1] + (len(merge_map),), dtype=y.dtype)
    for k, members in enumerate(merge_map):
        out[..., k] = y[..., members].sum(axis=-1)
    return out


def indirect_patlak_fit(x: np.ndarray, basis: TemporalBasis,
                        weights: np.ndarray | None = None,
                        schedule: FrameSchedule | None = None) -> np.ndarray:
    """Per-voxel weighted least squares of frame values against the basis.

    Weights default to frame durations when a schedule is supplied, else ones.
    Returns an N x 2 channel array.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    a = basis.matrix
    if x.shape[1] != a.shape[0]:
        raise ValidationError(f"{x.shape[1]} frames of data vs basis {a.shape[0]}")
    if weights is None:
        weights = frame_durations(schedule) if schedule is not None else np.ones(a.shape[0])
    w = np.asarray(weights, dtype=np.float64)
    aw = a * w[:, None]
    gram = a.T @ aw
    det = gram[0, 0] * gram[1, 1] - gram[0, 1] * gram[1, 0]
    scale = max(abs(gram).max(), 1e-300)
    if abs(det) <= 1e-14 * scale * scale:
        raise SingularFitError("temporal basis is rank deficient under these weights")
    rhs = x @ aw
    inv = np.array([[gram[1, 1], -gram[0, 1]], [-gram[1, 0], gram[0, 0]]]) / det
    return rhs @ inv.T


def _graphical_ols(xcoord: np.ndarray, ycoord: np.ndarray):
    n = xcoord.shape[-1]
    if n < 2:
        raise ValidationError("graphical fit needs at least two frames past the steady time")
    sx = xcoord.mean(axis=-1)
    sy = ycoord.mean(axis=-1)
    sxx = (xcoord * xcoord).mean(axis=-1)
    sxy = (xcoord * ycoord).mean(axis=-1)
    var = sxx - sx * sx
    if np.any(np.abs(var) <= 1e-14 * np.maximum(sxx, 1e-300)):
        raise SingularFitError("graphical coordinates are degenerate (constant abscissa)")
    slope = (sxy - sx * sy) / var
    intercept = sy - slope * sx
    return slope, intercept


def _steady_mask(schedule: FrameSchedule, t_star: float) -> np.ndarray:
    mask = schedule.end_times >= t_star - 1e-9
    if mask.sum() < 2:
        raise ValidationError(f"fewer than two frames end after t*={t_star} s")
    return mask


def indirect_logan_fit(tac: np.ndarray, schedule: FrameSchedule, cref: SampledCurve,
                       t_star: float):
    """Graphical fit of cumulative tissue activity over tissue activity.

    `tac` holds frame-averaged rates (activity per second); cumulative integrals
    use the frame-mean identity sum(rate * duration). Returns (slope, intercept).
    """
    tac = np.asarray(tac, dtype=np.float64)
    durations = frame_durations(schedule)
    ends = schedule.end_times
    cref.require_coverage(ends[-1])
    cum_tac = np.cumsum(tac * durations, axis=-1)
    grid = np.union1d(cref.times, ends)
    cum_ref = cumulative_trapezoid(cref(grid), grid, initial=0.0)
    cum_ref = cum_ref[_edge_lookup(grid, ends)]
    mask = _steady_mask(schedule, t_star)
    denom = tac[..., mask]
    if np.any(denom == 0):
        raise ValidationError("zero tissue activity in a frame used by the Logan fit")
    return _graphical_ols(cum_ref[mask] / denom, cum_tac[..., mask] / denom)


def indirect_relogan_fit(tac: np.ndarray, schedule: FrameSchedule, cref: SampledCurve,
                         t2_star: float):
    """Graphical fit with the reference value as the common denominator."""
    tac = np.asarray(tac, dtype=np.float64)
    durations = frame_durations(schedule)
    ends = schedule.end_times
    cref.require_coverage(ends[-1])
    cum_tac = np.cumsum(tac * durations, axis=-1)
    grid = np.union1d(cref.times, ends)
    cum_ref = cumulative_trapezoid(cref(grid), grid, initial=0.0)
    cum_ref = cum_ref[_edge_lookup(grid, ends)]
    ref_at_end = cref(ends)
    mask = _steady_mask(schedule, t2_star)
    denom = ref_at_end[mask]
    if np.any(denom == 0):
        raise ValidationError("zero reference activity at a frame end used by the fit")
    return _graphical_ols(cum_ref[mask] / denom, cum_tac[..., mask] / denom)
