"""Sparse lift-splat view transformation.

The camera branch lifts each feature pixel along discrete depth hypotheses:
the context vector ``v`` of a pixel is weighted by its depth probability
``alpha[d]`` and splatted into the BEV cell under the 3D point at that depth.
Two masks make the lift sparse:

* a foreground mask from 2D boxes (plus optional random noise windows), and
* a per-pixel top-k mask over depth bins.

Pooling uses a precomputed slot -> cell table whose slots are sorted by cell,
so that every cell reduces its contributions in one canonical order:
ascending ``slot = ((camera * hf + py) * wf + px) * D + bin``. The reference
:func:`lift_dense` visits slots in exactly that order, which is what makes the
two paths comparable bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import (
    FEATURE_DTYPE,
    CameraModel,
    DepthBins,
    GridSpec2D,
    bev_cell_of,
    project_points,
    unproject,
    unproject_points,
)
from .grid import DenseGrid2D, SparseGrid2D
from .parallel import ordered_map
from .rng import SplitMix64, derive_seed

PROB_FLOOR = 1e-12


class ShapeMismatch(ValueError):
    pass


@dataclass
class ImageFeatures:
    context: np.ndarray  # (hf, wf, C)
    stride: int = 1

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=FEATURE_DTYPE)
        if self.context.ndim != 3:
            raise ShapeMismatch("context must be (hf, wf, C)")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not np.all(np.isfinite(self.context)):
            raise ValueError("context features must be finite")

    @property
    def hf(self) -> int:
        return self.context.shape[0]

    @property
    def wf(self) -> int:
        return self.context.shape[1]

    @property
    def channels(self) -> int:
        return self.context.shape[2]


@dataclass
class DepthDistribution:
    probs: np.ndarray  # (hf, wf, D)
    bins: DepthBins

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3 or self.probs.shape[2] != self.bins.count:
            raise ShapeMismatch(f"probs {self.probs.shape} do not match {self.bins.count} bins")

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape[0], self.probs.shape[1]


@dataclass(frozen=True)
class Box2D:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError("box extent must be non-negative")


@dataclass
class FrustumTensor:
    """Sparse lifted entries of one camera: ``feats[i] = alpha[py, px, bin] * v[py, px]``."""

    px: np.ndarray
    py: np.ndarray
    bin: np.ndarray
    feats: np.ndarray
    shape: tuple[int, int, int]  # (hf, wf, D)
    camera_id: int = 0

    def __len__(self) -> int:
        return len(self.px)

    @property
    def occupancy(self) -> float:
        hf, wf, d = self.shape
        return len(self) / (hf * wf * d)


@dataclass
class DepthTarget:
    bins: np.ndarray  # (hf, wf) int, -1 where invalid
    valid: np.ndarray  # (hf, wf) bool


# ---------------------------------------------------------------------------
# depth distribution and masks


def softmax_depth(logits: np.ndarray, bins: DepthBins) -> DepthDistribution:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return DepthDistribution(e / e.sum(axis=-1, keepdims=True), bins)


def foreground_mask_from_boxes(boxes: Sequence[Box2D], cam: CameraModel, stride: int) -> np.ndarray:
    """Feature pixels whose ``stride x stride`` footprint meets any box."""
    hf, wf = cam.feature_shape(stride)
    mask = np.zeros((hf, wf), dtype=bool)
    for b in boxes:
        x0 = max(0, math.floor(b.x / stride))
        x1 = min(wf, math.ceil((b.x + b.w) / stride))
        y0 = max(0, math.floor(b.y / stride))
        y1 = min(hf, math.ceil((b.y + b.h) / stride))
        if x1 > x0 and y1 > y0:
            mask[y0:y1, x0:x1] = True
    return mask


def add_noise_windows(mask: np.ndarray, n: int, size_range: tuple[int, int], seed: int) -> np.ndarray:
    """Union ``mask`` with ``n`` seeded rectangles (feature pixels).

    Window ``i`` draws, in order, width and height in ``[lo, hi]`` and its
    top-left corner uniformly over the feature map.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    lo, hi = size_range
    out = np.array(mask, dtype=bool, copy=True)
    hf, wf = out.shape
    rng = SplitMix64(derive_seed(seed, "noise-windows"))
    for _ in range(n):
        w = rng.integers(lo, hi + 1)
        h = rng.integers(lo, hi + 1)
        x0 = rng.integers(0, wf)
        y0 = rng.integers(0, hf)
        out[y0:y0 + h, x0:x0 + w] = True
    return out


def topk_depth_mask(dist: DepthDistribution, k: int) -> np.ndarray:
    """Per pixel, the ``min(k, D)`` most probable bins; ties go to the lower bin."""
    if k < 1:
        raise ValueError("k must be >= 1")
    p = dist.probs
    k = min(k, p.shape[2])
    mask = np.zeros(p.shape, dtype=bool)
    if k == p.shape[2]:
        mask[:] = True
        return mask
    order = np.argsort(-p, axis=-1, kind="stable")[..., :k]
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def lift_mask(dist: DepthDistribution, fg: Optional[np.ndarray], k: Optional[int]) -> np.ndarray:
    """Combined (hf, wf, D) keep mask; ``None`` disables the respective module."""
    if k is None:
        m = np.ones(dist.probs.shape, dtype=bool)
    else:
        m = topk_depth_mask(dist, k)
    if fg is not None:
        if fg.shape != dist.shape:
            raise ShapeMismatch(f"mask {fg.shape} does not match feature map {dist.shape}")
        m &= fg[:, :, None]
    return m


def apply_masks(dist: DepthDistribution, fg: Optional[np.ndarray], k: Optional[int]) -> DepthDistribution:
    """Zero every probability outside the keep mask (no renormalization)."""
    return DepthDistribution(np.where(lift_mask(dist, fg, k), dist.probs, 0.0), dist.bins)


def sparse_frustum(img: ImageFeatures, dist: DepthDistribution, fg: Optional[np.ndarray],
                   k: Optional[int], camera_id: int = 0) -> FrustumTensor:
    if (img.hf, img.wf) != dist.shape:
        raise ShapeMismatch("image features and depth distribution disagree")
    keep = lift_mask(dist, fg, k)
    py, px, b = np.nonzero(keep)
    alpha = dist.probs[py, px, b].astype(FEATURE_DTYPE)
    feats = alpha[:, None] * img.context[py, px]
    return FrustumTensor(px, py, b, feats, keep.shape, camera_id)


# ---------------------------------------------------------------------------
# reference lift


def lift_dense(imgs: Sequence[ImageFeatures], dists: Sequence[DepthDistribution],
               cams: Sequence[CameraModel], grid: GridSpec2D) -> DenseGrid2D:
    """Dense lift-splat over every (camera, pixel, bin) slot; the reference oracle.

    Deliberately a plain loop: every slot is unprojected, binned and added in
    canonical slot order, masked or not.
    """
    channels = imgs[0].channels
    data = np.zeros((grid.nx, grid.ny, channels), dtype=FEATURE_DTYPE)
    for img, dist, cam in zip(imgs, dists, cams):
        _check_centers(dist.bins)
        for py in range(img.hf):
            for px in range(img.wf):
                v = img.context[py, px]
                u_pix = (px + 0.5) * img.stride
                v_pix = (py + 0.5) * img.stride
                for b in range(dist.bins.count):
                    p = unproject(u_pix, v_pix, dist.bins.center(b), cam)
                    cell = bev_cell_of(p, grid)
                    if cell is not None:
                        data[cell] += np.float32(dist.probs[py, px, b]) * v
    return DenseGrid2D(grid, data)


def lift_dense_batched(imgs: Sequence[ImageFeatures], dists: Sequence[DepthDistribution],
                       cams: Sequence[CameraModel], grid: GridSpec2D) -> DenseGrid2D:
    """Vectorized dense lift: materializes the full frustum tensor of each camera.

    Same slot order and float32 arithmetic as :func:`lift_dense`; this is the
    dense baseline used by the pipeline's dense mode.
    """
    channels = imgs[0].channels
    data = np.zeros((grid.nx * grid.ny, channels), dtype=FEATURE_DTYPE)
    for img, dist, cam in zip(imgs, dists, cams):
        cells = _slot_cells(cam, img.hf, img.wf, img.stride, dist.bins, grid)
        pix = np.repeat(np.arange(img.hf * img.wf), dist.bins.count)
        ok = cells >= 0
        alpha = dist.probs.reshape(-1).astype(FEATURE_DTYPE)
        ctx = img.context.reshape(-1, channels)
        np.add.at(data, cells[ok], alpha[ok, None] * ctx[pix[ok]])
    # linear cell id is iy * nx + ix
    return DenseGrid2D(grid, data.reshape(grid.ny, grid.nx, channels).transpose(1, 0, 2).copy())


def _check_centers(bins: DepthBins):
    if bins.center(0) <= 0:
        raise ValueError("depth bin centers must be positive")


# ---------------------------------------------------------------------------
# pooling index table


@dataclass
class PoolingIndexTable:
    """Precomputed frustum-slot -> BEV-cell map with cell-sorted intervals.

    ``perm[:n_valid]`` lists in-grid slots sorted by (cell, slot); interval
    ``i`` covers ``perm[starts[i]:starts[i] + lengths[i]]`` and maps to
    ``cell_ids[i]``. Out-of-grid slots follow in ascending slot order and have
    ``slot_cell == -1``.
    """

    n_cams: int
    hf: int
    wf: int
    stride: int
    bins: DepthBins
    grid: GridSpec2D
    slot_cell: np.ndarray
    perm: np.ndarray
    cell_ids: np.ndarray
    starts: np.ndarray
    lengths: np.ndarray

    @property
    def n_slots(self) -> int:
        return len(self.slot_cell)

    @property
    def n_valid(self) -> int:
        return int(self.lengths.sum())

    def check(self, imgs: Sequence[ImageFeatures], dists: Sequence[DepthDistribution]):
        if len(imgs) != self.n_cams or len(dists) != self.n_cams:
            raise ShapeMismatch(f"table built for {self.n_cams} cameras")
        for img, dist in zip(imgs, dists):
            if (img.hf, img.wf) != (self.hf, self.wf) or dist.shape != (self.hf, self.wf):
                raise ShapeMismatch("feature map shape does not match the pooling table")
            if img.stride != self.stride or dist.bins != self.bins:
                raise ShapeMismatch("stride or depth bins do not match the pooling table")


def _slot_cells(cam: CameraModel, hf: int, wf: int, stride: int, bins: DepthBins,
                grid: GridSpec2D) -> np.ndarray:
    _check_centers(bins)
    py, px, b = np.meshgrid(np.arange(hf), np.arange(wf), np.arange(bins.count), indexing="ij")
    u = (px + 0.5) * stride
    v = (py + 0.5) * stride
    d = bins.center(b.astype(np.float64))
    x, y, _ = unproject_points(u, v, d, cam)
    ix, iy, ok = grid.cells_of(x, y)
    return np.where(ok, iy * grid.nx + ix, -1).reshape(-1)


def build_pooling_index(cams: Sequence[CameraModel], hf: int, wf: int, bins: DepthBins,
                        grid: GridSpec2D, stride: int = 1) -> PoolingIndexTable:
    slot_cell = np.concatenate([_slot_cells(c, hf, wf, stride, bins, grid) for c in cams])
    valid = np.flatnonzero(slot_cell >= 0)
    order = np.argsort(slot_cell[valid], kind="stable")
    perm_valid = valid[order]
    perm = np.concatenate([perm_valid, np.flatnonzero(slot_cell < 0)])
    cell_ids, starts, lengths = np.unique(slot_cell[perm_valid], return_index=True, return_counts=True)
    return PoolingIndexTable(len(cams), hf, wf, stride, bins, grid, slot_cell, perm,
                             cell_ids, starts, lengths)


def lift_sparse(imgs: Sequence[ImageFeatures], dists: Sequence[DepthDistribution],
                fgs: Sequence[Optional[np.ndarray]], k: Optional[int],
                table: PoolingIndexTable, threads: int = 1) -> SparseGrid2D:
    """Masked lift-splat through the pooling table.

    Equals ``from_dense(lift_dense(imgs, masked dists))``. Per-camera masks may
    be built on worker threads; the reduction is serial in interval order.
    """
    table.check(imgs, dists)
    if len(fgs) != table.n_cams:
        raise ShapeMismatch("need one foreground mask (or None) per camera")
    channels = imgs[0].channels
    keep = np.concatenate(ordered_map(
        lambda i: lift_mask(dists[i], fgs[i], k).reshape(-1), range(table.n_cams), threads))
    alpha = np.concatenate([d.probs.reshape(-1) for d in dists]).astype(FEATURE_DTYPE)
    ctx = np.concatenate([img.context.reshape(-1, channels) for img in imgs])

    perm_valid = table.perm[: table.n_valid]
    sel = perm_valid[keep[perm_valid]]
    cells = table.slot_cell[sel]
    contrib = alpha[sel, None] * ctx[sel // table.bins.count]
    uniq, inv = np.unique(cells, return_inverse=True)
    out = np.zeros((len(uniq), channels), dtype=FEATURE_DTYPE)
    # ufunc.at is unbuffered and applies rows in order: canonical interval order
    np.add.at(out, inv, contrib)
    g = SparseGrid2D(table.grid, channels)
    g._set(uniq, out)
    return g.compact()


# ---------------------------------------------------------------------------
# depth supervision


def gt_depth_map(points, cam: CameraModel, hf: int, wf: int, stride: int, bins: DepthBins) -> DepthTarget:
    """Z-buffer the cloud into feature pixels; each pixel keeps its nearest depth."""
    xyz = np.asarray(getattr(points, "xyz", points), dtype=np.float64).reshape(-1, 3)
    u, v, z, ok = project_points(xyz, cam)
    px = np.floor(u[ok] / stride).astype(np.int64)
    py = np.floor(v[ok] / stride).astype(np.int64)
    inside = (px < wf) & (py < hf)
    depth = np.full(hf * wf, np.inf)
    np.minimum.at(depth, py[inside] * wf + px[inside], z[ok][inside])
    idx = np.full(hf * wf, -1, dtype=np.int64)
    hit = np.isfinite(depth)
    idx[hit] = bins.index_of(depth[hit])
    idx = idx.reshape(hf, wf)
    return DepthTarget(idx, idx >= 0)


def depth_loss(dist: DepthDistribution, target: DepthTarget) -> float:
    """Mean negative log-probability of the target bin over valid pixels."""
    if target.bins.shape != dist.shape:
        raise ShapeMismatch("target and distribution shapes differ")
    py, px = np.nonzero(target.valid)
    if len(py) == 0:
        return 0.0
    p = dist.probs[py, px, target.bins[py, px]]
    return float(np.mean(-np.log(np.maximum(p, PROB_FLOOR))))
