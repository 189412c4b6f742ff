"""Sparse BEV / voxel feature containers.

A grid stores feature rows for a set of *materialized* cells, keyed by the
linear cell id ``iy * nx + ix`` (2D) or ``(iz * ny + iy) * nx + ix`` (3D).
Ascending id is the canonical cell order, i.e. ``(iy, ix)`` lexicographic
in 2D. Absent cells read as zero. A cell is *active* when its feature is
not the zero vector; materialized exact-zero cells are only dropped by
:meth:`compact`.

Binary container (little endian)::

    magic    4s   b"SPGR"
    version  u2   1
    ndim     u2   2 or 3
    origin   ndim x f8
    cell     ndim x f8   (2D grids store cell_size twice)
    shape    ndim x u4
    channels u4
    count    u8
    records  count x (ndim x i4 index, channels x f4), canonical order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .geometry import FEATURE_DTYPE, GridSpec2D, VoxelSpec3D

MAGIC = b"SPGR"
FORMAT_VERSION = 1
# bytes per materialized cell beyond the payload: int64 key + int64 row slot
KEY_OVERHEAD_BYTES = 16

Spec = Union[GridSpec2D, VoxelSpec3D]


class GridError(ValueError):
    pass


@dataclass
class DenseGrid2D:
    spec: GridSpec2D
    data: np.ndarray  # (nx, ny, C)

    def __post_init__(self):
        if self.data.shape[:2] != self.spec.shape or self.data.ndim != 3:
            raise GridError(f"dense array shape {self.data.shape} does not match {self.spec.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def _linear_ids(shape, coords: np.ndarray) -> np.ndarray:
    out = coords[..., len(shape) - 1]
    for axis in range(len(shape) - 2, -1, -1):
        out = out * shape[axis] + coords[..., axis]
    return out


class _SparseGrid:
    ndim = 0

    def __init__(self, spec: Spec, channels: int):
        if channels < 1:
            raise GridError("channels must be positive")
        self.spec = spec
        self.channels = int(channels)
        self._ids = np.empty(0, dtype=np.int64)
        self._feats = np.empty((0, self.channels), dtype=FEATURE_DTYPE)
        self._n = 0
        self._lookup: Optional[dict] = None
        self._sorted = True

    # -- construction -----------------------------------------------------
    @classmethod
    def from_ids(cls, spec, ids, feats, channels: Optional[int] = None):
        """Build from (possibly repeated) cell ids; repeats are summed in input order."""
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        feats = np.asarray(feats, dtype=FEATURE_DTYPE)
        if channels is None:
            channels = feats.shape[1]
        feats = feats.reshape(len(ids), channels)
        g = cls(spec, channels)
        if len(ids) and (ids.min() < 0 or ids.max() >= g.n_cells):
            raise GridError("cell id out of range")
        uniq, inv = np.unique(ids, return_inverse=True)
        out = np.zeros((len(uniq), channels), dtype=FEATURE_DTYPE)
        np.add.at(out, inv, feats)
        g._set(uniq, out)
        return g

    @classmethod
    def from_coords(cls, spec, coords, feats, channels: Optional[int] = None):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, cls.ndim)
        if np.any(coords < 0) or np.any(coords >= np.array(spec.shape)):
            raise GridError("cell index out of range")
        return cls.from_ids(spec, _linear_ids(spec.shape, coords), feats, channels)

    def _set(self, ids: np.ndarray, feats: np.ndarray):
        self._ids = ids
        self._feats = feats
        self._n = len(ids)
        self._lookup = None
        self._sorted = bool(np.all(ids[1:] > ids[:-1])) if len(ids) > 1 else True

    def copy(self):
        g = type(self)(self.spec, self.channels)
        g._set(self.ids.copy(), self.features.copy())
        return g

    # -- indexing ---------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.spec.shape

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    def ids_of(self, coords) -> np.ndarray:
        return _linear_ids(self.shape, np.asarray(coords, dtype=np.int64))

    def coords_of(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        cols = []
        for n in self.shape:
            cols.append(ids % n)
            ids = ids // n
        return np.stack(cols, axis=-1)

    def in_range(self, cell) -> bool:
        return len(cell) == self.ndim and all(0 <= int(c) < n for c, n in zip(cell, self.shape))

    def cell_id(self, cell) -> int:
        if not self.in_range(cell):
            raise GridError(f"cell {tuple(cell)} outside grid {self.shape}")
        return int(self.ids_of(cell))

    # -- canonical views ------------------------------------------------------
    def _canonicalize(self):
        if not self._sorted:
            order = np.argsort(self._ids[: self._n], kind="stable")
            self._ids = self._ids[: self._n][order]
            self._feats = self._feats[: self._n][order]
            self._lookup = None
            self._sorted = True
        elif len(self._ids) != self._n:
            self._ids = self._ids[: self._n]
            self._feats = self._feats[: self._n]

    @property
    def ids(self) -> np.ndarray:
        """Materialized cell ids in canonical order."""
        self._canonicalize()
        return self._ids

    @property
    def features(self) -> np.ndarray:
        """Feature rows aligned with :attr:`ids`."""
        self._canonicalize()
        return self._feats

    @property
    def coords(self) -> np.ndarray:
        return self.coords_of(self.ids)

    def __len__(self) -> int:
        return self._n

    def _row(self, cid: int) -> Optional[int]:
        if self._lookup is None:
            self._lookup = {int(c): i for i, c in enumerate(self._ids[: self._n])}
        return self._lookup.get(cid)

    def get(self, cell) -> np.ndarray:
        row = self._row(self.cell_id(cell))
        if row is None:
            return np.zeros(self.channels, dtype=FEATURE_DTYPE)
        return self._feats[row].copy()

    def __contains__(self, cell) -> bool:
        return self.in_range(cell) and self._row(self.cell_id(cell)) is not None

    # -- mutation -------------------------------------------------------------
    def accumulate(self, cell, feat) -> None:
        """Add ``feat`` into ``cell`` (absent cells start at zero). O(1) amortized."""
        feat = np.asarray(feat, dtype=FEATURE_DTYPE)
        if feat.shape != (self.channels,):
            raise GridError(f"feature length {feat.shape} != ({self.channels},)")
        cid = self.cell_id(cell)
        row = self._row(cid)
        if row is not None:
            self._feats[row] += feat
            return
        if self._n == len(self._ids):
            cap = max(8, 2 * self._n)
            ids = np.empty(cap, dtype=np.int64)
            ids[: self._n] = self._ids[: self._n]
            feats = np.zeros((cap, self.channels), dtype=FEATURE_DTYPE)
            feats[: self._n] = self._feats[: self._n]
            self._ids, self._feats = ids, feats
        if self._n and cid < self._ids[self._n - 1]:
            self._sorted = False
        self._ids[self._n] = cid
        self._feats[self._n] = feat
        self._lookup[cid] = self._n
        self._n += 1

    def compact(self):
        """Drop materialized exact-zero cells in place; returns ``self``."""
        keep = np.any(self.features != 0, axis=1)
        if not keep.all():
            self._set(self.ids[keep], self.features[keep])
        return self

    # -- measurements ---------------------------------------------------------
    def active_mask(self) -> np.ndarray:
        return np.any(self.features != 0, axis=1)

    @property
    def active_count(self) -> int:
        return int(self.active_mask().sum())

    def active_ids(self) -> np.ndarray:
        return self.ids[self.active_mask()]

    def sparsity(self) -> float:
        return (self.n_cells - self.active_count) / self.n_cells

    def memory_bytes(self) -> int:
        """Modelled footprint: active cells x (payload + key overhead)."""
        return self.active_count * (self.channels * 4 + KEY_OVERHEAD_BYTES)

    def dense_memory_bytes(self) -> int:
        return self.n_cells * self.channels * 4

    def __eq__(self, other) -> bool:
        if type(other) is not type(self):
            return NotImplemented
        if other.spec != self.spec or other.channels != self.channels:
            return False
        a, b = self.active_mask(), other.active_mask()
        return (np.array_equal(self.ids[a], other.ids[b])
                and np.array_equal(self.features[a], other.features[b]))

    __hash__ = None

    def max_abs_diff(self, other) -> float:
        """Largest absolute feature difference, treating absent cells as zero."""
        if other.spec != self.spec or other.channels != self.channels:
            raise GridError("grids are not comparable")
        ids = np.union1d(self.ids, other.ids)
        a = np.zeros((len(ids), self.channels), dtype=np.float64)
        b = np.zeros_like(a)
        a[np.searchsorted(ids, self.ids)] = self.features
        b[np.searchsorted(ids, other.ids)] = other.features
        return float(np.abs(a - b).max()) if len(ids) else 0.0

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape}, channels={self.channels}, materialized={self._n})"

    # -- serialization --------------------------------------------------------
    def to_bytes(self) -> bytes:
        nd = self.ndim
        spec = self.spec
        if nd == 2:
            origin = (spec.origin_x, spec.origin_y)
            cell = (spec.cell_size, spec.cell_size)
        else:
            origin, cell = spec.origin, spec.cell
        header = struct.pack(
            f"<4sHH{nd}d{nd}d{nd}IIQ", MAGIC, FORMAT_VERSION, nd, *origin, *cell, *self.shape,
            self.channels, len(self),
        )
        rec = np.dtype([("idx", "<i4", (nd,)), ("feat", "<f4", (self.channels,))])
        records = np.empty(len(self), dtype=rec)
        records["idx"] = self.coords
        records["feat"] = self.features
        return header + records.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes):
        magic, version, nd = struct.unpack_from("<4sHH", buf, 0)
        if magic != MAGIC or version != FORMAT_VERSION:
            raise GridError("not a sparse grid container")
        if nd != cls.ndim:
            raise GridError(f"container holds a {nd}D grid")
        fmt = f"<{nd}d{nd}d{nd}IIQ"
        vals = struct.unpack_from(fmt, buf, 8)
        origin, cell, shape = vals[:nd], vals[nd:2 * nd], vals[2 * nd:3 * nd]
        channels, count = vals[3 * nd], vals[3 * nd + 1]
        if nd == 2:
            spec = GridSpec2D(origin[0], origin[1], cell[0], shape[0], shape[1])
        else:
            spec = VoxelSpec3D(origin, cell[0], cell[1], cell[2], *shape)
        rec = np.dtype([("idx", "<i4", (nd,)), ("feat", "<f4", (channels,))])
        records = np.frombuffer(buf, dtype=rec, count=count, offset=8 + struct.calcsize(fmt))
        return cls.from_coords(spec, records["idx"], records["feat"], channels)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


class SparseGrid2D(_SparseGrid):
    ndim = 2

    def __init__(self, spec: GridSpec2D, channels: int):
        if not isinstance(spec, GridSpec2D):
            raise GridError("SparseGrid2D needs a GridSpec2D")
        super().__init__(spec, channels)

    def to_dense(self) -> DenseGrid2D:
        return to_dense(self)

    def support_mask(self, nonzero_only: bool = False) -> np.ndarray:
        """(nx, ny) boolean map of materialized (or, optionally, non-zero) cells."""
        m = np.zeros(self.spec.shape, dtype=bool)
        c = self.coords[self.active_mask()] if nonzero_only else self.coords
        m[c[:, 0], c[:, 1]] = True
        return m


class SparseGrid3D(_SparseGrid):
    ndim = 3

    def __init__(self, spec: VoxelSpec3D, channels: int):
        if not isinstance(spec, VoxelSpec3D):
            raise GridError("SparseGrid3D needs a VoxelSpec3D")
        super().__init__(spec, channels)


def sparsity(grid: _SparseGrid) -> float:
    """Fraction of cells whose feature is zero."""
    return grid.sparsity()


def to_dense(grid: SparseGrid2D) -> DenseGrid2D:
    data = np.zeros((grid.spec.nx, grid.spec.ny, grid.channels), dtype=FEATURE_DTYPE)
    c = grid.coords
    data[c[:, 0], c[:, 1]] = grid.features
    return DenseGrid2D(grid.spec, data)


def from_dense(dense: DenseGrid2D, mask: Optional[np.ndarray] = None) -> SparseGrid2D:
    """Sparsify a dense grid; cells are kept where ``mask`` holds (default: non-zero)."""
    data = np.asarray(dense.data, dtype=FEATURE_DTYPE)
    if mask is None:
        mask = np.any(data != 0, axis=2)
    # transpose so that nonzero() enumerates in canonical (iy, ix) order
    iy, ix = np.nonzero(mask.T)
    g = SparseGrid2D(dense.spec, data.shape[2])
    g._set(iy.astype(np.int64) * dense.spec.nx + ix, data[ix, iy].copy())
    return g


def concat_fuse(a: SparseGrid2D, b: SparseGrid2D) -> SparseGrid2D:
    """Channel concatenation over the union of materialized cells; gaps are zero."""
    if a.spec != b.spec:
        raise GridError("cannot fuse grids with different specs")
    ids = np.union1d(a.ids, b.ids)
    out = np.zeros((len(ids), a.channels + b.channels), dtype=FEATURE_DTYPE)
    out[np.searchsorted(ids, a.ids), : a.channels] = a.features
    out[np.searchsorted(ids, b.ids), a.channels:] = b.features
    g = SparseGrid2D(a.spec, a.channels + b.channels)
    g._set(ids, out)
    return g


def add_grids(a: SparseGrid2D, b: SparseGrid2D, wa: float = 1.0, wb: float = 1.0) -> SparseGrid2D:
    """Cellwise ``wa * a + wb * b``."""
    if a.spec != b.spec or a.channels != b.channels:
        raise GridError("grids are not compatible")
    ids = np.union1d(a.ids, b.ids)
    out = np.zeros((len(ids), a.channels), dtype=FEATURE_DTYPE)
    out[np.searchsorted(ids, a.ids)] += np.float32(wa) * a.features
    out[np.searchsorted(ids, b.ids)] += np.float32(wb) * b.features
    g = SparseGrid2D(a.spec, a.channels)
    g._set(ids, out)
    return g
