"""End-to-end pipeline runner and measurement harness.

Timings cover the view transformer, LiDAR branch, fusion, encoder and head;
scene generation, sensor rendering and serialization are excluded. Memory is
modelled from cell counts (``grid.memory_bytes``), not measured.

Sweep CSV columns, in order::

    range_m, cell_size, stride, k, n_bins, fg_fraction, n_frames, mode,
    s_cam, s_fuse, active_cam, active_lidar, active_fused, n_cells,
    channels, dense_bytes, sparse_bytes, t_view_ms, t_lidar_ms, t_fuse_ms,
    t_encoder_ms, t_head_ms, t_temporal_ms, t_total_ms
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .encoder import (ConvKernel2D, ConvLayer, EncoderConfig, default_encoder_config, dense_conv2d,
                      dense_encode, encode)
from .geometry import DepthBins, GridSpec2D, VoxelSpec3D
from .grid import DenseGrid2D, SparseGrid2D, concat_fuse, from_dense
from .head import Detection, HeadWeights, evaluate, score_heatmap, select_peaks, decode_boxes
from .lidar import VoxelFeatureConfig, flatten_to_bev, voxelize
from .parallel import resolve_threads
from .rng import SplitMix64, derive_seed
from .sim import (OracleFeatureConfig, Scene, SceneConfig, generate_scene, oracle_encoder_config,
                  oracle_head_weights, oracle_image_features, render_camera_gt, render_lidar)
from .temporal import TemporalBuffer, merge_temporal
from .view_transformer import (PoolingIndexTable, apply_masks, build_pooling_index, foreground_mask_from_boxes,
                               add_noise_windows, lift_dense_batched, lift_mask, lift_sparse, softmax_depth)

CSV_COLUMNS = [
    "range_m", "cell_size", "stride", "k", "n_bins", "fg_fraction", "n_frames", "mode",
    "s_cam", "s_fuse", "active_cam", "active_lidar", "active_fused", "n_cells",
    "channels", "dense_bytes", "sparse_bytes", "t_view_ms", "t_lidar_ms", "t_fuse_ms",
    "t_encoder_ms", "t_head_ms", "t_temporal_ms", "t_total_ms",
]
STAGES = ("view", "lidar", "fuse", "encoder", "head", "temporal")


@dataclass(frozen=True)
class PipelineConfig:
    cell_size: float = 0.6
    stride: int = 4
    d_min: float = 1.0
    d_max: float = 61.0
    n_bins: int = 60
    k: Optional[int] = 1  # None disables the depth-aware mask
    use_fg_mask: bool = True  # False disables the image-aware mask
    fg_fraction: Optional[float] = None  # synthetic seeded mask instead of box masks
    noise_windows: int = 0
    noise_window_size: tuple[int, int] = (2, 6)
    voxel_cell: tuple[float, float, float] = (0.075, 0.075, 0.2)
    z_range: tuple[float, float] = (-1.0, 3.0)
    voxel_max_points: int = 10
    voxel_channels: int = 8
    encoder: str = "oracle"  # or "default" (seeded random weights)
    encoder_width: int = 32
    n_classes: int = 3
    class_strength: float = 1.0
    depth_sharpness: float = 50.0
    feature_noise: float = 0.0
    peak_radius: int = 2
    score_threshold: float = 0.5
    max_detections: int = 500
    match_radius: float = 2.0
    history_frames: int = 0
    dense: bool = False
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.stride < 1 or self.n_bins < 1 or self.cell_size <= 0:
            raise ValueError("stride, n_bins and cell_size must be positive")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.encoder not in ("oracle", "default"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.d_min <= 0 or self.d_max <= self.d_min:
            raise ValueError("need 0 < d_min < d_max")

    @property
    def bins(self) -> DepthBins:
        return DepthBins(self.d_min, self.d_max, self.n_bins)

    @property
    def oracle(self) -> OracleFeatureConfig:
        return OracleFeatureConfig(self.n_classes, None, self.class_strength, self.depth_sharpness,
                                   self.feature_noise, self.seed)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


def config_hash(scene_cfg: SceneConfig, pcfg: PipelineConfig) -> str:
    # threads and dense mode must not change results, so they are excluded
    p = pcfg.to_dict()
    p.pop("threads")
    p.pop("dense")
    blob = json.dumps({"scene": scene_cfg.to_dict(), "pipeline": p}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def check_configs(scene_cfg: SceneConfig, pcfg: PipelineConfig) -> None:
    """Reject inconsistent configurations before any work is done."""
    if pcfg.n_classes != scene_cfg.n_classes:
        raise ValueError("pipeline n_classes does not match the scene's classes")
    for v in pcfg.voxel_cell[:2]:
        r = pcfg.cell_size / v
        if abs(r - round(r)) > 1e-6:
            raise ValueError("BEV cell size must be a multiple of the voxel size")
    cams = scene_cfg.camera_rig()
    if len({(c.width, c.height) for c in cams}) > 1:
        raise ValueError("all cameras must share one image size")


@dataclass
class Frame:
    """Sensor inputs of one frame; produced outside the timed region."""

    imgs: list
    logits: list
    boxes: list
    cloud: object
    gts: list
    pose: object


def render_frame(scene: Scene, frame: int, pcfg: PipelineConfig) -> Frame:
    cams = scene.config.camera_rig()
    imgs, logits, boxes = [], [], []
    for i, cam in enumerate(cams):
        img, lg = oracle_image_features(scene, frame, cam, pcfg.oracle, pcfg.bins, pcfg.stride, i)
        imgs.append(img)
        logits.append(lg)
        boxes.append(render_camera_gt(scene, frame, cam)[0])
    return Frame(imgs, logits, boxes, render_lidar(scene, frame), scene.frames[frame].boxes,
                 scene.frames[frame].pose)


_TABLE_CACHE: dict = {}


def pooling_table(cams, hf: int, wf: int, bins: DepthBins, grid: GridSpec2D, stride: int) -> PoolingIndexTable:
    key = json.dumps([[c.to_dict() for c in cams], hf, wf, asdict(bins), grid.to_dict(), stride], sort_keys=True)
    if key not in _TABLE_CACHE:
        if len(_TABLE_CACHE) > 8:
            _TABLE_CACHE.clear()
        _TABLE_CACHE[key] = build_pooling_index(cams, hf, wf, bins, grid, stride)
    return _TABLE_CACHE[key]


def grids_for(scene_cfg: SceneConfig, pcfg: PipelineConfig) -> tuple[GridSpec2D, VoxelSpec3D]:
    bev = GridSpec2D.centered(scene_cfg.range_m, pcfg.cell_size)
    # the voxel grid spans exactly the BEV footprint so pillars align
    vx, vy, vz = pcfg.voxel_cell
    nxy = int(round(bev.nx * pcfg.cell_size / vx))
    nz = int(round((pcfg.z_range[1] - pcfg.z_range[0]) / vz))
    vox = VoxelSpec3D((bev.origin_x, bev.origin_y, pcfg.z_range[0]), vx, vy, vz, nxy, nxy, nz)
    return bev, vox


def encoder_for(pcfg: PipelineConfig, fused_channels: int) -> EncoderConfig:
    if pcfg.encoder == "oracle":
        return oracle_encoder_config(fused_channels, pcfg.oracle)
    return default_encoder_config(fused_channels, pcfg.encoder_width, pcfg.seed)


def head_for(pcfg: PipelineConfig, channels: int) -> HeadWeights:
    if pcfg.encoder == "oracle":
        return oracle_head_weights(pcfg.oracle, channels)
    # seeded linear head over the encoder output; only timings are meaningful
    rng = SplitMix64(derive_seed(pcfg.seed, "head"))
    b = 1.0 / math.sqrt(channels)
    return HeadWeights(rng.uniform(-b, b, pcfg.n_classes * channels).reshape(pcfg.n_classes, channels),
                       np.zeros(pcfg.n_classes), rng.uniform(-b, b, 7 * channels).reshape(7, channels) * 0.01,
                       np.zeros(7))


class _Timer:
    def __init__(self):
        self.t = {s: 0.0 for s in STAGES}

    def __call__(self, stage: str, fn: Callable, *args, **kw):
        t0 = time.perf_counter()
        out = fn(*args, **kw)
        self.t[stage] += time.perf_counter() - t0
        return out


def _camera_masks(frame: Frame, pcfg: PipelineConfig, cams) -> list:
    if not pcfg.use_fg_mask:
        return [None] * len(cams)
    if pcfg.fg_fraction is not None:
        return [synthetic_fg_mask(cam.feature_shape(pcfg.stride), pcfg.fg_fraction, derive_seed(pcfg.seed, "fg", i))
                for i, cam in enumerate(cams)]
    out = []
    for i, (cam, boxes) in enumerate(zip(cams, frame.boxes)):
        m = foreground_mask_from_boxes(boxes, cam, pcfg.stride)
        if pcfg.noise_windows:
            m = add_noise_windows(m, pcfg.noise_windows, pcfg.noise_window_size, derive_seed(pcfg.seed, i))
        out.append(m)
    return out


def synthetic_fg_mask(shape: tuple[int, int], fraction: float, seed: int) -> np.ndarray:
    """Exactly ``round(fraction * hf * wf)`` foreground pixels chosen by a seeded permutation."""
    n = shape[0] * shape[1]
    m = np.zeros(n, dtype=bool)
    m[SplitMix64(seed).permutation(n)[: int(round(fraction * n))]] = True
    return m.reshape(shape)


def _fuse_dense(cam: DenseGrid2D, lidar: SparseGrid2D) -> tuple[np.ndarray, np.ndarray]:
    ld = lidar.to_dense().data
    x = np.concatenate([cam.data, ld], axis=2)
    active = np.any(cam.data != 0, axis=2) | lidar.support_mask()
    return x, active


def camera_sparsity(frame: Frame, scene_cfg: SceneConfig, pcfg: PipelineConfig) -> tuple[float, float]:
    """``(S_cam, frustum occupancy)`` of the camera branch alone."""
    cams = scene_cfg.camera_rig()
    bev, _ = grids_for(scene_cfg, pcfg)
    hf, wf = cams[0].feature_shape(pcfg.stride)
    dists = [softmax_depth(lg, pcfg.bins) for lg in frame.logits]
    fgs = _camera_masks(frame, pcfg, cams)
    kept = sum(int(lift_mask(d, m, pcfg.k).sum()) for d, m in zip(dists, fgs))
    table = pooling_table(cams, hf, wf, pcfg.bins, bev, pcfg.stride)
    g = lift_sparse(frame.imgs, dists, fgs, pcfg.k, table, pcfg.threads)
    return g.sparsity(), kept / (len(cams) * hf * wf * pcfg.n_bins)


def process_frame(frame: Frame, scene_cfg: SceneConfig, pcfg: PipelineConfig,
                  buffer: Optional[TemporalBuffer] = None) -> tuple[list[Detection], dict, SparseGrid2D]:
    """Run the timed part of the pipeline on one rendered frame."""
    cams = scene_cfg.camera_rig()
    bev, vspec = grids_for(scene_cfg, pcfg)
    hf, wf = cams[0].feature_shape(pcfg.stride)
    threads = resolve_threads(pcfg.threads)
    table = None if pcfg.dense else pooling_table(cams, hf, wf, pcfg.bins, bev, pcfg.stride)
    timer = _Timer()
    t_start = time.perf_counter()

    def view():
        dists = [softmax_depth(lg, pcfg.bins) for lg in frame.logits]
        fgs = _camera_masks(frame, pcfg, cams)
        kept = sum(int(lift_mask(d, m, pcfg.k).sum()) for d, m in zip(dists, fgs))
        if pcfg.dense:
            masked = [apply_masks(d, m, pcfg.k) for d, m in zip(dists, fgs)]
            return lift_dense_batched(frame.imgs, masked, cams, bev), kept
        return lift_sparse(frame.imgs, dists, fgs, pcfg.k, table, threads), kept

    cam_out, kept = timer("view", view)

    def lidar():
        vox, _ = voxelize(frame.cloud, vspec, VoxelFeatureConfig(pcfg.voxel_max_points, pcfg.voxel_channels),
                          threads)
        return flatten_to_bev(vox, bev)

    lid = timer("lidar", lidar)

    if pcfg.dense:
        x, active = timer("fuse", _fuse_dense, cam_out, lid)
        cam_sparse = from_dense(cam_out)
        enc_cfg = encoder_for(pcfg, x.shape[2])
        y, y_active = timer("encoder", dense_encode, x, active, enc_cfg)
        encoded = timer("head", lambda: from_dense(DenseGrid2D(bev, y), y_active))
        fused_active = int(np.any(x[active] != 0, axis=1).sum())
        fused_channels = x.shape[2]
        fused_sparse_bytes = None
    else:
        fused = timer("fuse", concat_fuse, cam_out, lid)
        cam_sparse = cam_out
        enc_cfg = encoder_for(pcfg, fused.channels)
        encoded = timer("encoder", encode, fused, enc_cfg, threads)
        fused_active = fused.active_count
        fused_channels = fused.channels
        fused_sparse_bytes = fused.memory_bytes()

    if buffer is not None:
        merged = timer("temporal", merge_temporal, buffer, encoded, frame.pose, None, threads)
        buffer.push(encoded, frame.pose)
        encoded = merged
    head = head_for(pcfg, encoded.channels)

    def run_head():
        hm = score_heatmap(encoded, head)
        peaks = select_peaks(hm, pcfg.peak_radius, pcfg.score_threshold, pcfg.max_detections, threads)
        return decode_boxes(peaks, encoded, head)

    dets = timer("head", run_head)
    total = time.perf_counter() - t_start

    # union formula: a fused cell is non-zero iff either side is non-zero there
    union = np.union1d(cam_sparse.active_ids(), lid.active_ids())
    n_cells = bev.n_cells
    row = {
        "s_cam": cam_sparse.sparsity(),
        "s_fuse": (n_cells - fused_active) / n_cells,
        "s_fuse_union": 1.0 - len(union) / n_cells,
        "active_cam": cam_sparse.active_count,
        "active_lidar": lid.active_count,
        "active_fused": fused_active,
        "active_encoded": encoded.active_count,
        "n_cells": n_cells,
        "channels": fused_channels,
        "dense_bytes": n_cells * fused_channels * 4,
        "sparse_bytes": fused_sparse_bytes if fused_sparse_bytes is not None
        else fused_active * (fused_channels * 4 + 16),
        "frustum_occupancy": kept / (len(cams) * hf * wf * pcfg.n_bins),
        "n_detections": len(dets),
        "mode": "dense" if pcfg.dense else "sparse",
    }
    for s in STAGES:
        row[f"t_{s}_ms"] = timer.t[s] * 1e3
    row["t_total_ms"] = total * 1e3
    return dets, row, encoded


def run_pipeline(scene_cfg: SceneConfig, pcfg: PipelineConfig, frame: int = 0,
                 scene: Optional[Scene] = None) -> tuple[list[Detection], dict]:
    """Simulate one frame and run it through the pipeline.

    With ``pcfg.history_frames > 0`` the preceding frames are processed
    first and merged through the temporal buffer.
    """
    check_configs(scene_cfg, pcfg)
    scene = scene or generate_scene(scene_cfg)
    buffer = TemporalBuffer(pcfg.history_frames) if pcfg.history_frames else None
    first = max(0, frame - pcfg.history_frames) if buffer is not None else frame
    for f in range(first, frame + 1):
        fr = render_frame(scene, f, pcfg)
        dets, row, _ = process_frame(fr, scene_cfg, pcfg, buffer)
    ev = evaluate(dets, fr.gts, pcfg.match_radius)
    row.update({"precision": ev.precision, "recall": ev.recall, "ap": ev.ap, "n_gt": ev.n_gt})
    return dets, row


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class BenchConfig:
    range_m: list = field(default_factory=lambda: [20.0, 40.0])
    cell_sizes: list = field(default_factory=lambda: [0.6])
    strides: list = field(default_factory=lambda: [8])
    k_values: list = field(default_factory=lambda: [1, 10])
    n_bins: list = field(default_factory=lambda: [60])
    history_frames: list = field(default_factory=lambda: [0])
    fg_fractions: list = field(default_factory=lambda: [None])  # None: masks from projected boxes
    modes: list = field(default_factory=lambda: ["sparse"])
    n_objects: int = 20
    repetitions: int = 3
    warmup: int = 1
    seed: int = 0
    threads: int = 1
    encoder_sparsities: list = field(default_factory=lambda: [0.3, 0.5, 0.7, 0.8, 0.9, 0.92, 0.95])
    encoder_grid: int = 192
    encoder_channels: int = 32
    encoder_pattern: str = "clustered"  # or "uniform"

    def __post_init__(self):
        if self.repetitions < 3:
            raise ValueError("repetitions must be >= 3")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        for name in ("range_m", "cell_sizes", "strides", "k_values", "n_bins"):
            if any(v is not None and v <= 0 for v in getattr(self, name)):
                raise ValueError(f"{name} values must be positive")
        if any(v < 0 for v in self.history_frames):
            raise ValueError("history_frames must be >= 0")
        if any(f is not None and not 0 < f <= 1 for f in self.fg_fractions):
            raise ValueError("fg_fractions must lie in (0, 1]")
        if any(m not in ("sparse", "dense") for m in self.modes):
            raise ValueError("modes are 'sparse' or 'dense'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        return cls(**d)


@dataclass
class BenchReport:
    config: dict
    rows: list
    encoder_rows: list = field(default_factory=list)
    crossover: Optional[dict] = None
    environment: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jp = out / "report.json"
        jp.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        cp = out / "sweep.csv"
        with cp.open("w", newline="") as fh:
            w = csv.DictWriter(fh, CSV_COLUMNS, extrasaction="ignore")
            w.writeheader()
            w.writerows(self.rows)
        if self.encoder_rows:
            with (out / "encoder_sweep.csv").open("w", newline="") as fh:
                w = csv.DictWriter(fh, list(self.encoder_rows[0]))
                w.writeheader()
                w.writerows(self.encoder_rows)
        return cp, jp

    @classmethod
    def load(cls, path) -> "BenchReport":
        return cls(**json.loads(Path(path).read_text()))


def environment_note() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__, "machine": platform.machine(),
            "note": "wall-clock medians; compare ratios only"}


def _median_times(samples: list[dict]) -> dict:
    out = {}
    for key in samples[0]:
        if key.startswith("t_"):
            vals = [s[key] for s in samples]
            out[key] = statistics.median(vals)
            out[key.replace("_ms", "_min_ms")] = min(vals)
    return out


def _prepared_history(scene: Scene, scene_cfg: SceneConfig, pcfg: PipelineConfig, frame: int) -> list:
    """Encoded grids and poses for the history frames (untimed)."""
    hist = []
    for f in range(max(0, frame - pcfg.history_frames), frame):
        fr = render_frame(scene, f, pcfg)
        _, _, enc = process_frame(fr, scene_cfg, replace(pcfg, history_frames=0))
        hist.append((enc, fr.pose))
    return hist


def bench_config(scene_cfg: SceneConfig, pcfg: PipelineConfig, reps: int, warmup: int,
                 scene: Optional[Scene] = None) -> dict:
    """Median stage timings of one configuration; the frame is rendered once."""
    check_configs(scene_cfg, pcfg)
    scene = scene or generate_scene(scene_cfg)
    frame = scene_cfg.n_frames - 1 if pcfg.history_frames else 0
    hist = _prepared_history(scene, scene_cfg, pcfg, frame) if pcfg.history_frames else []
    fr = render_frame(scene, frame, pcfg)
    samples, row = [], None
    for i in range(warmup + reps):
        buf = None
        if pcfg.history_frames:
            buf = TemporalBuffer(pcfg.history_frames)
            for g, pose in hist:
                buf.push(g, pose)
        dets, row, _ = process_frame(fr, scene_cfg, pcfg, buf)
        if i >= warmup:
            samples.append({k: v for k, v in row.items() if k.startswith("t_")})
    row.update(_median_times(samples))
    ev = evaluate(dets, fr.gts, pcfg.match_radius)
    row.update({"precision": ev.precision, "recall": ev.recall})
    return row


def sweep(b: BenchConfig, progress: Optional[Callable[[str], None]] = None) -> BenchReport:
    rows = []
    axes = itertools.product(b.range_m, b.cell_sizes, b.strides, b.k_values, b.n_bins,
                             b.fg_fractions, b.history_frames, b.modes)
    for rng_m, cell, stride, k, nb, fgf, hist, mode in axes:
        # object density held at the 20-per-40m-range reference
        n_obj = int(round(b.n_objects * (rng_m / 40.0) ** 2))
        scfg = SceneConfig(range_m=rng_m, n_objects=n_obj, seed=b.seed, n_frames=hist + 1)
        d_max = float(math.ceil(rng_m * math.sqrt(2.0))) + 1.0
        pcfg = PipelineConfig(cell_size=cell, stride=stride, k=k, n_bins=nb, d_max=d_max, fg_fraction=fgf,
                              history_frames=hist, dense=(mode == "dense"), threads=b.threads, seed=b.seed)
        if progress:
            progress(f"range={rng_m} cell={cell} stride={stride} k={k} D={nb} fg={fgf} F={hist} {mode}")
        row = bench_config(scfg, pcfg, b.repetitions, b.warmup)
        row.update({"range_m": rng_m, "cell_size": cell, "stride": stride, "k": k, "n_bins": nb,
                    "fg_fraction": fgf, "n_frames": hist, "mode": mode, "n_objects": n_obj})
        rows.append(row)
    enc_rows = encoder_sparsity_sweep(b.encoder_sparsities, b.encoder_grid, b.encoder_channels,
                                      b.repetitions, b.warmup, b.seed, b.threads,
                                      b.encoder_pattern) if b.encoder_sparsities else []
    rep = BenchReport(b.to_dict(), rows, enc_rows, None, environment_note())
    if enc_rows:
        rep.crossover = crossover_analysis(rep)
    return rep


# ---------------------------------------------------------------------------
# encoder sparsity sweep


def synthetic_grid(n: int, channels: int, sparsity: float, seed: int, pattern: str = "clustered") -> SparseGrid2D:
    """``n x n`` grid with exactly ``round((1 - sparsity) * n * n)`` active cells.

    ``uniform`` picks cells independently. ``clustered`` keeps the top cells of
    a 3x3 box-smoothed noise field; its 3x3 dilation (about 2.5x at 70% and 3.9x
    at 90% sparsity) sits at or above what fused pipeline grids show, while
    i.i.d. cells dilate far more than any real BEV occupancy.
    """
    if pattern not in ("clustered", "uniform"):
        raise ValueError(f"unknown pattern {pattern!r}")
    spec = GridSpec2D(0.0, 0.0, 1.0, n, n)
    rng = SplitMix64(derive_seed(seed, "synthetic-grid"))
    n_active = int(round((1.0 - sparsity) * n * n))
    if pattern == "uniform":
        ids = np.sort(rng.permutation(n * n)[:n_active])
    else:
        u = np.pad(rng.uniform(0.0, 1.0, n * n).reshape(n, n), 1, mode="wrap")
        field = sum(u[dy:dy + n, dx:dx + n] for dy in range(3) for dx in range(3))
        ids = np.sort(np.argsort(-field.ravel(), kind="stable")[:n_active])
    feats = rng.uniform(0.1, 1.0, n_active * channels).reshape(n_active, channels).astype(np.float32)
    return SparseGrid2D.from_ids(spec, ids, feats)


def _time(fn: Callable, reps: int, warmup: int) -> list[float]:
    out = []
    for i in range(warmup + reps):
        t0 = time.perf_counter()
        fn()
        dt = time.perf_counter() - t0
        if i >= warmup:
            out.append(dt * 1e3)
    return out


def encoder_sparsity_sweep(sparsities: Sequence[float], n: int = 192, channels: int = 32, reps: int = 3,
                           warmup: int = 1, seed: int = 0, threads: int = 1,
                           pattern: str = "clustered") -> list[dict]:
    """Time the sparse encoder and its dense counterpart on synthesized grids."""
    cfg = default_encoder_config(channels, channels, seed)
    rows = []
    for s in sparsities:
        g = synthetic_grid(n, channels, s, seed, pattern)
        x = g.to_dense().data
        active = g.support_mask()
        # interleave the two so slow drifts in machine load hit both alike
        ts, td = [], []
        for _ in range(reps):
            ts += _time(lambda: encode(g, cfg, threads), 1, warmup)
            td += _time(lambda: dense_encode(x, active, cfg), 1, warmup)
            warmup = 0
        rows.append({"sparsity": float(s), "active": len(g), "t_sparse_ms": statistics.median(ts),
                     "t_dense_ms": statistics.median(td), "t_sparse_min_ms": min(ts), "t_dense_min_ms": min(td),
                     "ratio": statistics.median(ts) / statistics.median(td)})
    return rows


def crossover_analysis(report) -> dict:
    """Sparsity at which sparse and dense encoder times meet, by linear interpolation.

    Uses the highest sparsity interval where the ratio ``t_sparse / t_dense``
    drops through 1. Without a crossing the nearest boundary is returned and
    ``flag`` says which side won throughout.
    """
    rows = report.encoder_rows if isinstance(report, BenchReport) else report
    if not rows:
        raise ValueError("report has no sparsity-controlled encoder sweep")
    rows = sorted(rows, key=lambda r: r["sparsity"])
    s = [r["sparsity"] for r in rows]
    ratio = [r["t_sparse_ms"] / r["t_dense_ms"] for r in rows]
    res = {"sparsity": s, "ratio": ratio}
    for i in range(len(rows) - 1, 0, -1):
        if ratio[i] < 1.0 <= ratio[i - 1]:
            a = (ratio[i - 1] - 1.0) / (ratio[i - 1] - ratio[i])
            res.update(crossover_sparsity=s[i - 1] + a * (s[i] - s[i - 1]), flag="interpolated")
            return res
    if all(r < 1.0 for r in ratio):
        res.update(crossover_sparsity=s[0], flag="sparse_faster_everywhere")
    elif ratio[-1] >= 1.0:
        res.update(crossover_sparsity=s[-1], flag="dense_faster_everywhere")
    else:
        res.update(crossover_sparsity=s[0], flag="sparse_faster_everywhere")
    return res


# ---------------------------------------------------------------------------
# range scaling


def dense_cell_count(range_m: float, cell: float) -> int:
    return GridSpec2D.centered(range_m, cell).n_cells


def range_scaling_sweep(ranges: Sequence[float] = (50.0, 100.0, 150.0, 200.0), density_per_km2: float = 3125.0,
                        cell: float = 0.6, stride: int = 8, bin_step: float = 2.0, seed: int = 0) -> dict:
    """Active cells versus range at fixed object density, with a log-log slope fit.

    The default density equals 20 objects over the 80 m x 80 m reference area.
    """
    rows = []
    for r in ranges:
        n_obj = int(round(density_per_km2 * (2 * r / 1000.0) ** 2))
        scfg = SceneConfig(range_m=r, n_objects=n_obj, seed=seed)
        d_max = float(math.ceil(r * math.sqrt(2.0) / bin_step) * bin_step) + 1.0
        pcfg = PipelineConfig(cell_size=cell, stride=stride, d_max=d_max, n_bins=int(round((d_max - 1.0) / bin_step)),
                              seed=seed)
        _, row = run_pipeline(scfg, pcfg)
        rows.append({"range_m": r, "n_objects": n_obj, "n_cells": row["n_cells"], "active_fused": row["active_fused"],
                     "active_cam": row["active_cam"], "active_lidar": row["active_lidar"],
                     "dense_bytes": row["dense_bytes"], "sparse_bytes": row["sparse_bytes"], "s_fuse": row["s_fuse"]})
    lr = np.log([r["range_m"] for r in rows])
    return {"rows": rows,
            "active_exponent": float(np.polyfit(lr, np.log([r["active_fused"] for r in rows]), 1)[0]),
            "dense_exponent": float(np.polyfit(lr, np.log([r["dense_bytes"] for r in rows]), 1)[0])}
