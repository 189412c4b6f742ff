"""Ego-motion alignment of history BEV grids and multi-frame merging."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .encoder import EncoderConfig, encode
from .geometry import FEATURE_DTYPE, RigidTransform, compose, invert
from .grid import GridError, SparseGrid2D, concat_fuse
from .parallel import ordered_map


@dataclass(frozen=True)
class FramePose:
    timestamp: float
    ego_to_world: RigidTransform


def relative_bev_motion(pose_hist: FramePose, pose_cur: FramePose) -> tuple[float, float, float]:
    """``(yaw, tx, ty)`` of ``inverse(cur) o hist``, dropping roll, pitch and z."""
    T = compose(invert(pose_cur.ego_to_world), pose_hist.ego_to_world)
    return T.yaw, float(T.translation[0]), float(T.translation[1])


def align_history(hist: SparseGrid2D, pose_hist: FramePose, pose_cur: FramePose,
                  spec=None) -> SparseGrid2D:
    """Move ``hist`` into the current ego frame by nearest-cell scatter.

    Cells landing on the same destination are averaged; cells leaving the
    grid are dropped.
    """
    spec = spec or hist.spec
    if spec != hist.spec:
        raise GridError("history grid spec does not match")
    out = SparseGrid2D(spec, hist.channels)
    if len(hist) == 0:
        return out
    yaw, tx, ty = relative_bev_motion(pose_hist, pose_cur)
    c = hist.coords
    x, y = spec.cell_center(c[:, 0], c[:, 1])
    cs, sn = np.cos(yaw), np.sin(yaw)
    xd = cs * x - sn * y + tx
    yd = sn * x + cs * y + ty
    ix, iy, ok = spec.cells_of(xd, yd)
    if not ok.any():
        return out
    dest = iy[ok] * spec.nx + ix[ok]
    uniq, inv, counts = np.unique(dest, return_inverse=True, return_counts=True)
    acc = np.zeros((len(uniq), hist.channels), dtype=np.float64)
    np.add.at(acc, inv, hist.features[ok].astype(np.float64))
    out._set(uniq, (acc / counts[:, None]).astype(FEATURE_DTYPE))
    return out


class TemporalBuffer:
    """Up to ``capacity`` (grid, pose) pairs, newest last, strictly increasing timestamps."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity if capacity else 0)

    def push(self, grid: SparseGrid2D, pose: FramePose) -> None:
        if self._items and pose.timestamp <= self._items[-1][1].timestamp:
            raise ValueError("timestamps must be strictly increasing")
        if self.capacity:
            self._items.append((grid, pose))

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def newest_first(self):
        return list(reversed(self._items))


def merge_temporal(buffer: TemporalBuffer, current: SparseGrid2D, pose_cur: FramePose,
                   merge_cfg: Optional[EncoderConfig] = None, threads: int = 1) -> SparseGrid2D:
    """Concatenate ``[current, lag 1, ..., lag F]`` channel blocks and encode.

    Lag ``j`` is the ``j``-th most recent history frame aligned to the current
    pose; missing lags are zero blocks, so the width is always ``(F+1)*C``.
    """
    hist = buffer.newest_first()
    for g, _ in hist:
        if g.spec != current.spec or g.channels != current.channels:
            raise GridError("history grid does not match current grid")
    aligned = ordered_map(lambda item: align_history(item[0], item[1], pose_cur), hist, threads)
    aligned += [SparseGrid2D(current.spec, current.channels)] * (buffer.capacity - len(aligned))
    fused = current
    for g in aligned:
        fused = concat_fuse(fused, g)
    if merge_cfg is not None and merge_cfg.layers:
        fused = encode(fused, merge_cfg, threads)
    return fused
