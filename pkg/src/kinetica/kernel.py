"""Nonlocal similarity kernel built from a prior image.

Each voxel gets a feature vector (its local patch); weights between voxels in a
search window follow exp(-||fi - fj||^2 / (2 Nf sigma^2)) with sigma^2 the prior
variance. Rows keep only the strongest k neighbors (self always kept), stored
sparse together with the explicit transpose for exact adjoint application.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .core import PriorImage, ValidationError, read_container, write_container


@dataclass(frozen=True)
class KernelConfig:
    patch_radius: int = 1
    window_radius: int = 3
    k_neighbors: int | None = None  # default 50 for 3D grids, 20 for 2D
    normalize_rows: bool = False

    def resolved_neighbors(self, is_3d: bool) -> int:
        if self.k_neighbors is not None:
            return self.k_neighbors
        return 50 if is_3d else 20


def _axis_radii(dims, radius):
    # singleton axes carry no patch/window extent
    return tuple(radius if d > 1 else 0 for d in dims)


def _patch_offsets(radii):
    axes = [np.arange(-r, r + 1) for r in radii]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def extract_features(prior: PriorImage, cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    """N x Nf matrix of vectorized patches, boundaries handled by edge replication."""
    dims = prior.grid.dims
    radii = _axis_radii(dims, cfg.patch_radius)
    volume = prior.data.reshape(dims)
    padded = np.pad(volume, [(r, r) for r in radii], mode="edge")
    offsets = _patch_offsets(radii)
    n_f = offsets.shape[0]
    feats = np.empty((prior.grid.n_voxels, n_f))
    base = np.indices(dims).reshape(3, -1).T  # voxel coordinates, grid order
    for k, off in enumerate(offsets):
        coords = base + off + np.array(radii)
        feats[:, k] = padded[coords[:, 0], coords[:, 1], coords[:, 2]]
    return feats


@dataclass
class KernelMatrix:
    """Sparse nonlocal weights with a materialized transpose."""

    matrix: sp.csr_matrix
    matrix_t: sp.csr_matrix
    sigma2: float
    config: KernelConfig

    @property
    def n_voxels(self) -> int:
        return self.matrix.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.n_voxels:
            raise ValidationError(f"{x.shape[0]} rows vs kernel size {self.n_voxels}")
        return self.matrix @ x

    def apply_transpose(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        if g.shape[0] != self.n_voxels:
            raise ValidationError(f"{g.shape[0]} rows vs kernel size {self.n_voxels}")
        return self.matrix_t @ g


def identity_kernel(n_voxels: int) -> KernelMatrix:
    eye = sp.identity(n_voxels, format="csr")
    return KernelMatrix(eye, eye.T.tocsr(), 1.0, KernelConfig())


def build_kernel(prior: PriorImage, cfg: KernelConfig = KernelConfig()) -> KernelMatrix:
    """Construct the sparse kernel matrix from the prior image.

    For every voxel the search window is scanned, the k strongest weights kept
    (ties broken toward smaller voxel index, self always kept). A constant prior
    (zero variance) degenerates to equal window weights with a warning so that
    ablation runs do not abort.
    """
    dims = prior.grid.dims
    n = prior.grid.n_voxels
    is_3d = sum(d > 1 for d in dims) == 3
    k_keep = cfg.resolved_neighbors(is_3d)
    window = _patch_offsets(_axis_radii(dims, cfg.window_radius))
    if k_keep > window.shape[0]:
        raise ValidationError(
            f"k_neighbors={k_keep} exceeds window of {window.shape[0]} voxels")
    sigma2 = float(np.var(prior.data))

    base = np.indices(dims).reshape(3, -1).T
    strides = np.array([dims[1] * dims[2], dims[2], 1])
    degenerate = sigma2 == 0.0
    if degenerate:
        warnings.warn("constant prior image: kernel degenerates to equal window weights",
                      RuntimeWarning, stacklevel=2)
        n_f = _patch_offsets(_axis_radii(dims, cfg.patch_radius)).shape[0]
        feats = np.zeros((n, n_f))
    else:
        feats = extract_features(prior, cfg)
        n_f = feats.shape[1]

    # candidate weights per window offset, vectorized over all voxels
    n_off = window.shape[0]
    neighbor_idx = np.empty((n, n_off), dtype=np.int64)
    weights = np.empty((n, n_off))
    valid = np.empty((n, n_off), dtype=bool)
    for o, off in enumerate(window):
        coords = base + off
        ok = np.all((coords >= 0) & (coords < np.array(dims)), axis=1)
        j = coords @ strides
        j[~ok] = 0
        neighbor_idx[:, o] = j
        valid[:, o] = ok
        if degenerate:
            weights[:, o] = 1.0
        else:
            d2 = np.sum((feats - feats[j]) ** 2, axis=1)
            weights[:, o] = np.exp(-d2 / (2.0 * n_f * sigma2))
    weights[~valid] = -1.0

    self_col = int(np.nonzero((window == 0).all(axis=1))[0][0])
    rows, cols, vals = [], [], []
    for i in range(n):
        cand_j = neighbor_idx[i]
        cand_w = weights[i]
        if degenerate:
            keep = np.nonzero(valid[i])[0]
            w_keep = np.full(keep.size, 1.0 / keep.size)
            order = np.argsort(cand_j[keep], kind="stable")
            keep = keep[order]
            w_keep = w_keep[order]
        else:
            # sort by (-weight, voxel index); self (weight 1) is forced first
            rank = np.lexsort((cand_j, -cand_w))
            rank = rank[valid[i][rank]]
            rank = np.concatenate(([self_col], rank[rank != self_col]))
            keep = rank[:k_keep]
            w_keep = cand_w[keep]
        rows.append(np.full(keep.size, i, dtype=np.int64))
        cols.append(cand_j[keep])
        vals.append(w_keep)
    matrix = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n)).tocsr()
    if cfg.normalize_rows and not degenerate:
        inv = 1.0 / np.asarray(matrix.sum(axis=1)).ravel()
        matrix = sp.diags(inv) @ matrix
        matrix = matrix.tocsr()
    return KernelMatrix(matrix, matrix.T.tocsr(), sigma2, cfg)


def dump_kernel(kernel: KernelMatrix, path_prefix: str) -> None:
    """Persist row-pointer / column-index / value arrays as binary containers."""
    m = kernel.matrix
    for name, arr in (("rowptr", m.indptr), ("colidx", m.indices), ("values", m.data)):
        arr = np.asarray(arr, dtype=np.float64)
        write_container(f"{path_prefix}.{name}", (arr.size, 1, 1), (1.0, 1.0, 1.0),
                        arr[:, None])


def load_kernel(path_prefix: str, n_voxels: int) -> KernelMatrix:
    parts = {}
    for name in ("rowptr", "colidx", "values"):
        _, _, frames = read_container(f"{path_prefix}.{name}")
        parts[name] = frames[:, 0]
    matrix = sp.csr_matrix(
        (parts["values"], parts["colidx"].astype(np.int64),
         parts["rowptr"].astype(np.int64)),
        shape=(n_voxels, n_voxels))
    return KernelMatrix(matrix, matrix.T.tocsr(), float("nan"), KernelConfig())
