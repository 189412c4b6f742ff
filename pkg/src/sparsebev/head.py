"""Center-style detection head on sparse BEV features.

Scores are per-class sigmoids of a linear map over each active cell's
feature. Peaks are local maxima within a Chebyshev window; ties go to the
smaller cell id, so every plateau yields exactly one peak.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import GridSpec2D, Vec3
from .grid import GridError, SparseGrid2D
from .parallel import ordered_map

N_REG = 7  # dx, dy, z, log l, log w, log h, yaw


@dataclass
class HeadWeights:
    score_w: np.ndarray  # (n_classes, C)
    score_b: np.ndarray  # (n_classes,)
    reg_w: np.ndarray  # (7, C)
    reg_b: np.ndarray  # (7,)

    def __post_init__(self):
        self.score_w = np.atleast_2d(np.asarray(self.score_w, dtype=np.float64))
        self.score_b = np.asarray(self.score_b, dtype=np.float64).reshape(self.n_classes)
        self.reg_w = np.asarray(self.reg_w, dtype=np.float64).reshape(N_REG, self.channels)
        self.reg_b = np.asarray(self.reg_b, dtype=np.float64).reshape(N_REG)
        for a in (self.score_w, self.score_b, self.reg_w, self.reg_b):
            if not np.all(np.isfinite(a)):
                raise ValueError("head weights must be finite")

    @property
    def n_classes(self) -> int:
        return self.score_w.shape[0]

    @property
    def channels(self) -> int:
        return self.score_w.shape[1]

    @classmethod
    def zeros(cls, n_classes: int, channels: int) -> "HeadWeights":
        return cls(np.zeros((n_classes, channels)), np.zeros(n_classes),
                   np.zeros((N_REG, channels)), np.zeros(N_REG))


@dataclass(frozen=True)
class Box3D:
    center: Vec3
    l: float
    w: float
    h: float
    yaw: float
    cls: int
    track_id: int = -1

    def __post_init__(self):
        if min(self.l, self.w, self.h) <= 0:
            raise ValueError("box dimensions must be positive")

    def corners(self) -> np.ndarray:
        """(8, 3) corners; bottom face first, counter-clockwise from (+l/2, +w/2)."""
        sx = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * self.l / 2
        sy = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * self.w / 2
        sz = np.array([-1, -1, -1, -1, 1, 1, 1, 1]) * self.h / 2
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.stack([self.center[0] + c * sx - s * sy,
                         self.center[1] + s * sx + c * sy,
                         self.center[2] + sz], axis=1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["center"] = list(self.center)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(Vec3(*d["center"]), d["l"], d["w"], d["h"], d["yaw"], d["cls"], d.get("track_id", -1))


@dataclass(frozen=True)
class Detection:
    center: Vec3
    l: float
    w: float
    h: float
    yaw: float
    cls: int
    score: float
    cell: tuple = field(default=(), compare=False)

    def to_dict(self) -> dict:
        return {"center": list(self.center), "l": self.l, "w": self.w, "h": self.h,
                "yaw": self.yaw, "cls": self.cls, "score": self.score, "cell": list(self.cell)}


@dataclass
class Heatmap:
    spec: GridSpec2D
    ids: np.ndarray  # active cell ids, canonical order
    scores: np.ndarray  # (N, n_classes) float64

    @property
    def n_classes(self) -> int:
        return self.scores.shape[1]


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def score_heatmap(g: SparseGrid2D, w: HeadWeights) -> Heatmap:
    if g.channels != w.channels:
        raise GridError(f"grid has {g.channels} channels, head expects {w.channels}")
    keep = g.active_mask()
    feats = g.features[keep].astype(np.float64)
    return Heatmap(g.spec, g.ids[keep], sigmoid(feats @ w.score_w.T + w.score_b))


def _class_peaks(hm: Heatmap, cls: int, radius: int, threshold: float):
    nx, ny = hm.spec.nx, hm.spec.ny
    s = hm.scores[:, cls]
    cand = np.flatnonzero(s >= threshold)
    if len(cand) == 0:
        return []
    r = radius
    dense = np.full((ny + 2 * r, nx + 2 * r), -np.inf)
    ix, iy = hm.ids % nx, hm.ids // nx
    dense[iy + r, ix + r] = s
    cx, cy, cs = ix[cand], iy[cand], s[cand]
    ok = np.ones(len(cand), dtype=bool)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dx == 0 and dy == 0:
                continue
            nb = dense[cy + r + dy, cx + r + dx]
            # neighbour after us in canonical order loses ties, before us wins them
            later = dy > 0 or (dy == 0 and dx > 0)
            ok &= (cs > nb) | ((cs == nb) & later)
    ids = hm.ids[cand[ok]]
    return [(int(i), cls, float(v)) for i, v in zip(ids, cs[ok])]


def select_peaks(hm: Heatmap, radius: int = 1, threshold: float = 0.5, max_out: int = 500,
                 threads: int = 1) -> list[tuple[int, int, float]]:
    """Return ``(cell_id, class, score)`` sorted by descending score, then cell id, then class."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    per_cls = ordered_map(lambda c: _class_peaks(hm, c, radius, threshold), range(hm.n_classes), threads)
    peaks = [p for ps in per_cls for p in ps]
    peaks.sort(key=lambda p: (-p[2], p[0], p[1]))
    return peaks[:max_out]


def select_peaks_bruteforce(hm: Heatmap, radius: int, threshold: float, max_out: int = 500):
    """All-pairs reference for :func:`select_peaks`."""
    nx = hm.spec.nx
    out = []
    for c in range(hm.n_classes):
        for a in range(len(hm.ids)):
            sa, ia = hm.scores[a, c], int(hm.ids[a])
            if sa < threshold:
                continue
            peak = True
            for b in range(len(hm.ids)):
                ib = int(hm.ids[b])
                if ib == ia or max(abs(ib % nx - ia % nx), abs(ib // nx - ia // nx)) > radius:
                    continue
                sb = hm.scores[b, c]
                if sb > sa or (sb == sa and ib < ia):
                    peak = False
                    break
            if peak:
                out.append((ia, c, float(sa)))
    out.sort(key=lambda p: (-p[2], p[0], p[1]))
    return out[:max_out]


def decode_boxes(peaks: Sequence[tuple[int, int, float]], g: SparseGrid2D, w: HeadWeights,
                 grid: Optional[GridSpec2D] = None) -> list[Detection]:
    grid = grid or g.spec
    dets = []
    for cid, cls, score in peaks:
        ix, iy = cid % grid.nx, cid // grid.nx
        f = g.get((ix, iy)).astype(np.float64)
        r = w.reg_w @ f + w.reg_b
        dx, dy = np.clip(r[:2], -0.5, 0.5)
        cx, cy = grid.cell_center(ix, iy)
        dets.append(Detection(
            Vec3(float(cx + dx * grid.cell_size), float(cy + dy * grid.cell_size), float(r[2])),
            float(math.exp(r[3])), float(math.exp(r[4])), float(math.exp(r[5])), float(r[6]),
            int(cls), float(score), (int(ix), int(iy))))
    return dets


def detect(g: SparseGrid2D, w: HeadWeights, radius: int = 1, threshold: float = 0.5,
           max_out: int = 500, threads: int = 1) -> list[Detection]:
    return decode_boxes(select_peaks(score_heatmap(g, w), radius, threshold, max_out, threads), g, w)


@dataclass(frozen=True)
class EvalResult:
    precision: float
    recall: float
    ap: float
    tp: int
    n_det: int
    n_gt: int


def evaluate(dets: Sequence[Detection], gts: Sequence[Box3D], match_radius: float = 2.0) -> EvalResult:
    """Greedy center-distance matching and un-interpolated step-curve AP.

    Detections are taken by descending score (ties by input order); each
    matches the nearest unmatched ground truth of its class within
    ``match_radius`` in the BEV plane.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    used = [False] * len(gts)
    tp_flags = []
    for i in order:
        d = dets[i]
        best, best_dist = -1, match_radius
        for j, g in enumerate(gts):
            if used[j] or g.cls != d.cls:
                continue
            dist = math.hypot(d.center[0] - g.center[0], d.center[1] - g.center[1])
            if dist <= best_dist and (best < 0 or dist < best_dist):
                best, best_dist = j, dist
        if best >= 0:
            used[best] = True
        tp_flags.append(best >= 0)
    n_gt, n_det = len(gts), len(dets)
    tp = sum(tp_flags)
    if n_gt == 0:
        # nothing to find: perfect iff nothing was claimed
        v = 1.0 if n_det == 0 else 0.0
        return EvalResult(v, 1.0, v, 0, n_det, 0)
    ap, cum, prev_r = 0.0, 0, 0.0
    for i, hit in enumerate(tp_flags, 1):
        cum += hit
        r = cum / n_gt
        ap += (r - prev_r) * (cum / i)
        prev_r = r
    return EvalResult(tp / n_det if n_det else 0.0, tp / n_gt, ap, tp, n_det, n_gt)


def detections_to_jsonl(frames: Iterable[tuple[int, Sequence[Detection]]], config_hash: str) -> str:
    lines = []
    for frame_id, dets in frames:
        for d in dets:
            rec = d.to_dict()
            rec["frame_id"] = frame_id
            rec["config_hash"] = config_hash
            lines.append(json.dumps(rec, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def write_detections(path, frames, config_hash: str) -> None:
    Path(path).write_text(detections_to_jsonl(frames, config_hash))
