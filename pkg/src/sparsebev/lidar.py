"""Point clouds, voxelization and pillar flattening.

Voxel features are hand-crafted per-voxel statistics standing in for a
learned voxel encoder::

    [mean dx, mean dy, mean dz, mean intensity, log(1 + count), 0, ...]

offsets are measured from the voxel center, and only the first
``max_points_per_voxel`` points of a voxel (input order) contribute.

Point cloud files are raw little-endian float32 records ``(x, y, z, i)``
with a JSON sidecar ``<name>.json`` holding the frame pose.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import FEATURE_DTYPE, GridSpec2D, RigidTransform, VoxelSpec3D
from .grid import GridError, SparseGrid2D, SparseGrid3D
from .parallel import chunk_bounds, ordered_map, resolve_threads

N_STATS = 5


@dataclass
class PointCloud:
    xyz: np.ndarray  # (n, 3)
    intensity: np.ndarray  # (n,)
    labels: Optional[np.ndarray] = None  # simulator track ids, -1 for ground; not serialized

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if len(self.intensity) != len(self.xyz):
            raise ValueError("intensity length does not match point count")
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.xyz)

    def save(self, path, pose: Optional[RigidTransform] = None, timestamp: float = 0.0) -> None:
        path = Path(path)
        rec = np.empty((len(self), 4), dtype="<f4")
        rec[:, :3] = self.xyz
        rec[:, 3] = self.intensity
        path.write_bytes(rec.tobytes())
        sidecar = {"timestamp": timestamp, "ego_to_world": (pose or RigidTransform()).to_dict(),
                   "n_points": len(self)}
        path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=1))

    @classmethod
    def load(cls, path) -> tuple["PointCloud", dict]:
        path = Path(path)
        rec = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(-1, 4)
        meta = json.loads(path.with_suffix(".json").read_text())
        return cls(rec[:, :3], rec[:, 3]), meta


@dataclass(frozen=True)
class VoxelFeatureConfig:
    max_points_per_voxel: int = 10
    out_channels: int = 8

    def __post_init__(self):
        if self.max_points_per_voxel < 1:
            raise ValueError("max_points_per_voxel must be >= 1")
        if self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")


@dataclass
class VoxelizeStats:
    n_points: int
    n_in_range: int
    n_dropped: int
    n_capped: int = field(default=0)


def voxelize(pc: PointCloud, spec: VoxelSpec3D, cfg: VoxelFeatureConfig = VoxelFeatureConfig(),
             threads: int = 1) -> tuple[SparseGrid3D, VoxelizeStats]:
    """Group points into voxels and compute per-voxel statistics.

    Workers split the work at voxel boundaries, so each voxel is always
    reduced by the same code over the same contiguous points.
    """
    idx, ok = spec.voxels_of(pc.xyz)
    pts = np.flatnonzero(ok)
    grid = SparseGrid3D(spec, cfg.out_channels)
    stats = VoxelizeStats(len(pc), len(pts), len(pc) - len(pts))
    if len(pts) == 0:
        return grid, stats
    vid = grid.ids_of(idx[pts])
    order = np.argsort(vid, kind="stable")  # input order within a voxel
    pts, vid = pts[order], vid[order]
    uniq, starts, counts = np.unique(vid, return_index=True, return_counts=True)
    rank = np.arange(len(vid)) - np.repeat(starts, counts)
    capped = rank < cfg.max_points_per_voxel
    stats.n_capped = int((~capped).sum())
    pts, vid = pts[capped], vid[capped]
    starts = np.concatenate([[0], np.cumsum(np.minimum(counts, cfg.max_points_per_voxel))[:-1]])
    used = np.minimum(counts, cfg.max_points_per_voxel)

    centers = spec.voxel_center(grid.coords_of(uniq))
    offsets = pc.xyz[pts] - np.repeat(centers, used, axis=0)
    values = np.concatenate([offsets, pc.intensity[pts, None]], axis=1)

    def reduce(bounds):
        lo, hi = bounds
        seg = starts[lo:hi] - starts[lo]
        end = starts[hi] if hi < len(starts) else len(values)
        return np.add.reduceat(values[starts[lo]:end], seg, axis=0) if hi > lo else np.empty((0, 4))

    parts = resolve_threads(threads)
    sums = np.concatenate(ordered_map(reduce, chunk_bounds(len(uniq), parts), parts))
    feats = np.zeros((len(uniq), N_STATS), dtype=np.float64)
    feats[:, :4] = sums / used[:, None]
    feats[:, 4] = np.log1p(used)
    out = np.zeros((len(uniq), cfg.out_channels), dtype=FEATURE_DTYPE)
    c = min(N_STATS, cfg.out_channels)
    out[:, :c] = feats[:, :c]
    grid._set(uniq, out)
    return grid, stats


def _integer_ratio(a: float, b: float) -> int:
    r = a / b
    n = int(round(r))
    if abs(r - n) > 1e-6:
        raise GridError(f"{a} is not an integer multiple of voxel size {b}")
    return n


def flatten_to_bev(vox: SparseGrid3D, bev: GridSpec2D) -> SparseGrid2D:
    """Stack z-slices into channel blocks: slice ``iz`` -> channels ``[iz*C, (iz+1)*C)``.

    Voxels sharing a BEV cell and slice are summed.
    """
    spec = vox.spec
    fx = _integer_ratio(bev.cell_size, spec.cell_x)
    fy = _integer_ratio(bev.cell_size, spec.cell_y)
    if fx < 1 or fy < 1:
        raise GridError("BEV cells must be at least one voxel wide")
    # voxel-unit offset of the voxel origin relative to the BEV origin
    ox = _integer_ratio(spec.origin[0] - bev.origin_x, spec.cell_x)
    oy = _integer_ratio(spec.origin[1] - bev.origin_y, spec.cell_y)
    C = vox.channels
    out_c = spec.nz * C
    if len(vox) == 0:
        return SparseGrid2D(bev, out_c)
    c = vox.coords
    bx = np.floor_divide(c[:, 0] + ox, fx)
    by = np.floor_divide(c[:, 1] + oy, fy)
    ok = (bx >= 0) & (bx < bev.nx) & (by >= 0) & (by < bev.ny)
    rows = np.flatnonzero(ok)
    ids = by[rows] * bev.nx + bx[rows]
    feats = np.zeros((len(rows), out_c), dtype=FEATURE_DTYPE)
    cols = c[rows, 2, None] * C + np.arange(C)
    np.put_along_axis(feats, cols, vox.features[rows], axis=1)
    return SparseGrid2D.from_ids(bev, ids, feats, out_c)
