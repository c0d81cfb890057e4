"""Shared domain types, grids, frame schedules, and the binary volume/sinogram container."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"KINETICA-VOL\x00\x00\x00\x00"
FORMAT_VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF_DTYPE = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(Exception):
    """Raised when a container file is corrupt or inconsistent."""


class ValidationError(ValueError):
    """Raised when a domain-type invariant is violated."""


def _as_triple(values, name, pad):
    vals = tuple(values)
    if len(vals) == 2:
        vals = vals + (pad,)
    if len(vals) != 3:
        raise ValidationError(f"{name} must have 2 or 3 entries, got {len(vals)}")
    return vals


@dataclass(frozen=True)
class ImageGrid:
    """Voxel grid; 2D grids are carried as 3D with a singleton last axis."""

    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float]

    def __init__(self, dims, voxel_size):
        dims = _as_triple((int(d) for d in dims), "dims", 1)
        voxel_size = _as_triple((float(v) for v in voxel_size), "voxel_size", 1.0)
        if any(d < 1 for d in dims):
            raise ValidationError(f"all dims must be >= 1, got {dims}")
        if any(v <= 0 for v in voxel_size):
            raise ValidationError(f"voxel_size must be > 0, got {voxel_size}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", voxel_size)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def ravel(self, volume: np.ndarray) -> np.ndarray:
        """Flatten a (nx, ny, nz) array to the canonical voxel order."""
        if tuple(volume.shape) != self.dims:
            raise ValidationError(f"volume shape {volume.shape} != grid dims {self.dims}")
        return np.ascontiguousarray(volume).reshape(self.n_voxels)

    def unravel(self, flat: np.ndarray) -> np.ndarray:
        """Reshape flat voxel data (N or N x C) back to (nx, ny, nz[, C])."""
        flat = np.asarray(flat)
        if flat.shape[0] != self.n_voxels:
            raise ValidationError(f"expected {self.n_voxels} voxels, got {flat.shape[0]}")
        return flat.reshape(self.dims + flat.shape[1:])


@dataclass(frozen=True)
class FrameSchedule:
    """Ordered acquisition frames (t_start, t_end) in seconds plus the steady-state index."""

    frames: tuple[tuple[float, float], ...]
    steady_index: int = 0

    def __init__(self, frames, steady_index: int = 0):
        frames = tuple((float(a), float(b)) for a, b in frames)
        if not frames:
            raise ValidationError("schedule must contain at least one frame")
        prev_end = -np.inf
        for a, b in frames:
            if b <= a:
                raise ValidationError(f"frame ({a}, {b}) has non-positive duration")
            if a < prev_end:
                raise ValidationError(f"frame ({a}, {b}) overlaps the previous frame")
            prev_end = b
        if not 0 <= steady_index < len(frames):
            raise ValidationError(f"steady_index {steady_index} out of range for {len(frames)} frames")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "steady_index", int(steady_index))

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def start_times(self) -> np.ndarray:
        return np.array([a for a, _ in self.frames])

    @property
    def end_times(self) -> np.ndarray:
        return np.array([b for _, b in self.frames])

    def with_steady_time(self, t_steady: float) -> "FrameSchedule":
        """Return a copy whose steady_index is the first frame starting at or after t_steady."""
        starts = self.start_times
        idx = int(np.searchsorted(starts, t_steady - 1e-9))
        if idx >= len(self.frames):
            raise ValidationError(f"steady time {t_steady} s beyond the last frame start")
        return FrameSchedule(self.frames, steady_index=idx)

    def steady_frames(self) -> "FrameSchedule":
        """The tail sub-schedule from steady_index on, re-indexed with steady_index 0."""
        return FrameSchedule(self.frames[self.steady_index:], steady_index=0)


def frame_durations(schedule: FrameSchedule) -> np.ndarray:
    """Per-frame duration t_end - t_start in seconds."""
    return schedule.end_times - schedule.start_times


def parse_frame_spec(spec: str) -> tuple[tuple[float, float], ...]:
    """Parse a compact frame listing like '4x20,4x40,4x60' into (start, end) pairs."""
    t = 0.0
    frames = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if "x" in part:
            count_s, dur_s = part.split("x", 1)
            count, dur = int(count_s), float(dur_s)
        else:
            count, dur = 1, float(part)
        if count < 1 or dur <= 0:
            raise ValidationError(f"bad frame group {part!r}")
        for _ in range(count):
            frames.append((t, t + dur))
            t += dur
    if not frames:
        raise ValidationError(f"empty frame spec {spec!r}")
    return tuple(frames)


def _check_finite(data: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{name} contains non-finite values")


@dataclass
class DynamicImage:
    """Decay-corrected frame-integrated activity, N voxels x T frames."""

    grid: ImageGrid
    data: np.ndarray
    schedule: FrameSchedule | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 1:
            self.data = self.data[:, None]
        if self.data.shape[0] != self.grid.n_voxels:
            raise ValidationError(
                f"data has {self.data.shape[0]} voxels, grid has {self.grid.n_voxels}")
        _check_finite(self.data, "dynamic image")
        if np.any(self.data < 0):
            raise ValidationError("dynamic image has negative activity")
        if self.schedule is not None and self.data.shape[1] != len(self.schedule):
            raise ValidationError(
                f"{self.data.shape[1]} frames of data vs {len(self.schedule)} in schedule")

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


@dataclass
class ParametricImage:
    """Two kinetic channels per voxel: (slope, intercept) or (dvol, intercept)."""

    grid: ImageGrid
    channels: np.ndarray

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 2 or self.channels.shape[1] != 2:
            raise ValidationError(f"channels must be N x 2, got {self.channels.shape}")
        if self.channels.shape[0] != self.grid.n_voxels:
            raise ValidationError("channel rows do not match grid voxel count")
        _check_finite(self.channels, "parametric image")

    @property
    def slope(self) -> np.ndarray:
        return self.channels[:, 0]

    @property
    def intercept(self) -> np.ndarray:
        return self.channels[:, 1]


@dataclass
class PriorImage:
    """Co-registered anatomical intensity image on the reconstruction grid."""

    grid: ImageGrid
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64).reshape(-1)
        if self.data.shape[0] != self.grid.n_voxels:
            raise ValidationError("prior voxel count does not match grid")
        _check_finite(self.data, "prior image")


# ---------------------------------------------------------------------------
# Binary container
#
# magic (16 bytes) | u32 version | u8 dtype (0=f32, 1=f64) | u8 ndim |
# u64 dims[ndim] | f64 axis_size[ndim] | u64 n_frames | data frame-major.
# Everything little-endian.  A frame is prod(dims) values in C order.
# Volumes use ndim=3, sinograms ndim=2 (angles x bins per frame).
# ---------------------------------------------------------------------------


def write_container(path, dims, axis_size, frames: np.ndarray, dtype="f8") -> None:
    dims = tuple(int(d) for d in dims)
    axis_size = tuple(float(v) for v in axis_size)
    if len(axis_size) != len(dims):
        raise ValidationError("axis_size length must match dims")
    if any(d < 1 for d in dims):
        raise ValidationError(f"degenerate dims {dims}")
    frames = np.asarray(frames)
    if frames.ndim == 1:
        frames = frames[:, None]
    n = int(np.prod(dims))
    if frames.shape[0] != n:
        raise ValidationError(f"data rows {frames.shape[0]} != prod(dims) {n}")
    _check_finite(frames, "container data")
    out_dtype = np.dtype(dtype).newbyteorder("<")
    tag = _TAG_OF_DTYPE[np.dtype(dtype)]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IBB", FORMAT_VERSION, tag, len(dims)))
        fh.write(struct.pack(f"<{len(dims)}Q", *dims))
        fh.write(struct.pack(f"<{len(dims)}d", *axis_size))
        fh.write(struct.pack("<Q", frames.shape[1]))
        fh.write(np.ascontiguousarray(frames.T).astype(out_dtype).tobytes())


def read_container(path):
    """Read a container file; returns (dims, axis_size, frames N x T as f64)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 6 or raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a kinetica container")
    off = len(MAGIC)
    version, tag, ndim = struct.unpack_from("<IBB", raw, off)
    off += 6
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    if not 1 <= ndim <= 4:
        raise FormatError(f"{path}: implausible ndim {ndim}")
    try:
        dims = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        axis_size = struct.unpack_from(f"<{ndim}d", raw, off)
        off += 8 * ndim
        (n_frames,) = struct.unpack_from("<Q", raw, off)
        off += 8
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    n = int(np.prod(dims))
    dt = _DTYPE_TAGS[tag]
    expected = n * n_frames * dt.itemsize
    if len(raw) - off != expected:
        raise FormatError(
            f"{path}: payload is {len(raw) - off} bytes, header declares {expected}")
    data = np.frombuffer(raw, dtype=dt, count=n * n_frames, offset=off)
    frames = data.reshape(n_frames, n).T.astype(np.float64)
    return dims, axis_size, frames


def write_volume(img: DynamicImage | PriorImage | ParametricImage, path, dtype="f8") -> None:
    """Write an image to the binary volume format (parametric channels stored as frames)."""
    if isinstance(img, PriorImage):
        data = img.data[:, None]
    elif isinstance(img, ParametricImage):
        data = img.channels
    else:
        data = img.data
    write_container(path, img.grid.dims, img.grid.voxel_size, data, dtype=dtype)


def _read_volume_raw(path):
    dims, axis_size, frames = read_container(path)
    if len(dims) != 3:
        raise FormatError(f"{path}: expected a 3-axis volume, found ndim={len(dims)}")
    return ImageGrid(dims, axis_size), frames


def read_volume(path) -> DynamicImage:
    """Read a volume file back into a DynamicImage (single-frame files wrap priors)."""
    grid, frames = _read_volume_raw(path)
    return DynamicImage(grid, frames)


def read_prior(path) -> PriorImage:
    grid, frames = _read_volume_raw(path)
    if frames.shape[1] != 1:
        raise FormatError(f"{path}: prior must be single-frame, has {frames.shape[1]}")
    return PriorImage(grid, frames[:, 0])


def read_parametric(path) -> ParametricImage:
    grid, frames = _read_volume_raw(path)
    if frames.shape[1] != 2:
        raise FormatError(f"{path}: parametric image must have 2 channels, has {frames.shape[1]}")
    return ParametricImage(grid, frames)


def write_sinogram(y: np.ndarray, path, n_angles: int, n_bins: int, bin_size: float) -> None:
    """Write an M x T counts array; M must equal n_angles * n_bins (z folded into bins)."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] != n_angles * n_bins:
        raise ValidationError(f"{y.shape[0]} rows vs geometry {n_angles}x{n_bins}")
    write_container(path, (n_angles, n_bins), (np.pi / n_angles, bin_size), y)


def read_sinogram(path):
    """Read a sinogram file; returns (y M x T, n_angles, n_bins, bin_size)."""
    dims, axis_size, frames = read_container(path)
    if len(dims) != 2:
        raise FormatError(f"{path}: expected a 2-axis sinogram, found ndim={len(dims)}")
    return frames, int(dims[0]), int(dims[1]), float(axis_size[1])
