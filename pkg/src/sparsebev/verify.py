"""Oracle-equivalence suites shared by the ``verify`` command and the tests.

Every suite draws its instances from seeded :class:`SplitMix64` streams and
returns a JSON-ready dict without timings, so two runs with the same seed
serialize to identical bytes whatever the worker count.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import replace
from typing import Callable, Optional

import numpy as np

from .bench import PipelineConfig, config_hash, process_frame, render_frame
from .encoder import ConvKernel2D, _conv, dense_conv2d, encode, default_encoder_config
from .geometry import CameraModel, DepthBins, GridSpec2D, RigidTransform, VoxelSpec3D
from .grid import DenseGrid2D, SparseGrid2D, concat_fuse, from_dense
from .head import Heatmap, detections_to_jsonl, evaluate, select_peaks
from .lidar import PointCloud, voxelize
from .rng import SplitMix64, derive_seed
from .sim import SceneConfig, generate_scene
from .temporal import FramePose, TemporalBuffer, align_history, merge_temporal
from .view_transformer import (ImageFeatures, apply_masks, build_pooling_index, lift_dense, lift_mask,
                               lift_sparse, softmax_depth)

LIFT_TOL = 1e-5
CONV_TOL = 1e-4


def _rng(seed: int, *keys) -> SplitMix64:
    return SplitMix64(derive_seed(seed, *keys))


def grid_digest(g) -> str:
    return hashlib.sha256(g.to_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# instance generators


def random_lift_instance(seed: int, hf: int = 8, wf: int = 16, channels: int = 4, n_bins: int = 12,
                         n_cams: int = 2, stride: int = 4):
    """Cameras, features, depth distributions, masks and ``k`` for one lift check."""
    r = _rng(seed, "lift")
    cams = [CameraModel.looking(r.uniform(-math.pi, math.pi), width=wf * stride, height=hf * stride,
                                hfov_deg=r.uniform(50.0, 90.0)) for _ in range(n_cams)]
    bins = DepthBins(1.0, r.uniform(8.0, 14.0), n_bins)
    grid = GridSpec2D.centered(12.0, r.uniform(0.5, 1.5))
    imgs = [ImageFeatures(r.normal(hf * wf * channels).reshape(hf, wf, channels), stride) for _ in cams]
    dists = [softmax_depth(2.0 * r.normal(hf * wf * n_bins).reshape(hf, wf, n_bins), bins) for _ in cams]
    fgs = [r.uniform(size=hf * wf).reshape(hf, wf) < r.uniform(0.1, 0.9) for _ in cams]
    k = r.integers(1, n_bins + 1)
    return cams, imgs, dists, fgs, k, bins, grid


def random_sparse_grid(seed: int, n: int = 16, channels: int = 3, spec: Optional[GridSpec2D] = None) -> SparseGrid2D:
    r = _rng(seed, "grid")
    spec = spec or GridSpec2D(0.0, 0.0, 1.0, n, n)
    occ = r.uniform(0.02, 0.6)
    keep = r.uniform(size=spec.n_cells) < occ
    ids = np.flatnonzero(keep)
    feats = r.normal(len(ids) * channels).reshape(len(ids), channels).astype(np.float32)
    return SparseGrid2D.from_ids(spec, ids, feats)


# ---------------------------------------------------------------------------
# suites


def suite_lift_equivalence(seed: int, n: int = 200) -> dict:
    worst = 0.0
    for i in range(n):
        cams, imgs, dists, fgs, k, bins, grid = random_lift_instance(derive_seed(seed, i))
        table = build_pooling_index(cams, imgs[0].hf, imgs[0].wf, bins, grid, imgs[0].stride)
        sparse = lift_sparse(imgs, dists, fgs, k, table)
        masked = [apply_masks(d, m, k) for d, m in zip(dists, fgs)]
        ref = from_dense(lift_dense(imgs, masked, cams, grid))
        worst = max(worst, sparse.max_abs_diff(ref))
    return {"name": "lift_equivalence", "instances": n, "max_abs_err": worst, "passed": worst <= LIFT_TOL}


def suite_full_mask_identity(seed: int, n: int = 20) -> dict:
    exact = True
    for i in range(n):
        cams, imgs, dists, _, _, bins, grid = random_lift_instance(derive_seed(seed, "full", i))
        table = build_pooling_index(cams, imgs[0].hf, imgs[0].wf, bins, grid, imgs[0].stride)
        sparse = lift_sparse(imgs, dists, [None] * len(cams), bins.count, table)
        ref = from_dense(lift_dense(imgs, dists, cams, grid))
        exact &= np.array_equal(sparse.ids, ref.ids) and np.array_equal(sparse.features, ref.features)
    return {"name": "full_mask_identity", "instances": n, "bit_exact": bool(exact), "passed": bool(exact)}


def frustum_occupancy_instance(seed: int, hf: int = 8, wf: int = 16, n_bins: int = 648, k: int = 10,
                               fg_fraction: float = 0.25):
    """Distinct per-pixel probabilities and an exact-fraction foreground mask."""
    r = _rng(seed, "occupancy")
    bins = DepthBins(1.0, 1.0 + 0.3 * n_bins, n_bins)
    logits = np.stack([r.permutation(n_bins) for _ in range(hf * wf)]).reshape(hf, wf, n_bins) * 0.01
    dist = softmax_depth(logits, bins)
    fg = np.zeros(hf * wf, dtype=bool)
    fg[r.permutation(hf * wf)[: int(round(fg_fraction * hf * wf))]] = True
    return dist, fg.reshape(hf, wf), k


def suite_frustum_occupancy(seed: int) -> dict:
    dist, fg, k = frustum_occupancy_instance(seed)
    occ = float(lift_mask(dist, fg, k).mean())
    expected = 0.25 * 10 / 648
    return {"name": "frustum_occupancy", "measured": occ, "expected": expected,
            "passed": abs(occ - expected) <= 1e-6}


def suite_sparse_conv(seed: int, n: int = 200) -> dict:
    worst, sets_ok = 0.0, True
    for i in range(n):
        g = random_sparse_grid(derive_seed(seed, "conv", i))
        x, active = g.to_dense().data, g.support_mask()
        for j, (mode, stride) in enumerate((("submanifold", 1), ("regular", 1), ("regular", 2))):
            ker = ConvKernel2D.random(3, 4, 3, derive_seed(seed, i, j))
            out = _conv(g, ker, mode, stride)
            ref, ref_active = dense_conv2d(x, active, ker, mode, stride)
            sets_ok &= bool(np.array_equal(out.support_mask(), ref_active))
            c = out.coords
            err = np.abs(out.features - ref[c[:, 0], c[:, 1]]).max() if len(c) else 0.0
            worst = max(worst, float(err))
    return {"name": "sparse_conv", "instances": n, "max_abs_err": worst, "active_sets_equal": sets_ok,
            "passed": sets_ok and worst <= CONV_TOL}


def e2e_scene_config(seed: int) -> SceneConfig:
    return SceneConfig(range_m=40.0, n_objects=20, seed=seed, occlusion_free=True)


def suite_end_to_end(seed: int, n_seeds: int = 10, threads: int = 1) -> tuple[dict, str]:
    pcfg = PipelineConfig(threads=threads, seed=0)
    per_seed, frames = [], []
    ok = True
    for s in range(seed, seed + n_seeds):
        scfg = e2e_scene_config(s)
        scene = generate_scene(scfg)
        fr = render_frame(scene, 0, pcfg)
        dets, _, _ = process_frame(fr, scfg, pcfg)
        dets_d, _, _ = process_frame(fr, scfg, replace(pcfg, dense=True))
        ev = evaluate(dets, fr.gts, pcfg.match_radius)
        same = [d.to_dict() for d in dets] == [d.to_dict() for d in dets_d]
        good = ev.precision == 1.0 and ev.recall == 1.0 and same
        ok &= good
        per_seed.append({"seed": s, "precision": ev.precision, "recall": ev.recall, "n_det": ev.n_det,
                         "n_gt": ev.n_gt, "dense_equal": same, "scene_lock": scene.lock()})
        frames.append((s, dets))
    jsonl = detections_to_jsonl(frames, config_hash(e2e_scene_config(seed), pcfg))
    return {"name": "end_to_end", "seeds": per_seed, "passed": bool(ok)}, jsonl


def integer_shift_roundtrip(g: SparseGrid2D, shift_cells: tuple[int, int]):
    """Align by an integer-cell ego translation and back; returns (there, back, expected)."""
    spec = g.spec
    t = (shift_cells[0] * spec.cell_size, shift_cells[1] * spec.cell_size, 0.0)
    p0 = FramePose(0.0, RigidTransform())
    p1 = FramePose(1.0, RigidTransform(np.eye(3), t))
    there = align_history(g, p0, p1)
    back = align_history(there, p1, p0)
    c = g.coords
    keep = ((c[:, 0] - shift_cells[0] >= 0) & (c[:, 0] - shift_cells[0] < spec.nx)
            & (c[:, 1] - shift_cells[1] >= 0) & (c[:, 1] - shift_cells[1] < spec.ny))
    expected = SparseGrid2D.from_ids(spec, g.ids[keep], g.features[keep], g.channels)
    return there, back, expected


def rotation_oracle(g: SparseGrid2D, quarter_turns: int = 1) -> SparseGrid2D:
    """Brute-force index remap for an ego yaw of ``-quarter_turns * 90`` degrees
    about the center of an even, origin-centered grid (history rotated by +90°)."""
    n = g.spec.nx
    out = {}
    for (ix, iy), f in zip(g.coords.tolist(), g.features):
        for _ in range(quarter_turns % 4):
            ix, iy = n - 1 - iy, ix
        out[iy * n + ix] = f
    ids = np.array(sorted(out), dtype=np.int64)
    feats = np.array([out[i] for i in ids], dtype=np.float32).reshape(len(ids), g.channels)
    return SparseGrid2D.from_ids(g.spec, ids, feats, g.channels)


def suite_temporal(seed: int, n: int = 20) -> dict:
    shift_ok, rot_ok = True, True
    spec = GridSpec2D.centered(9.6, 0.6)  # 32 x 32, centered on the ego
    for i in range(n):
        g = random_sparse_grid(derive_seed(seed, "temporal", i), channels=4, spec=spec)
        r = _rng(seed, "shift", i)
        shift = (r.integers(-5, 6), r.integers(-5, 6))
        _, back, expected = integer_shift_roundtrip(g, shift)
        shift_ok &= bool(np.array_equal(back.ids, expected.ids) and np.array_equal(back.features, expected.features))
        rot = align_history(g, FramePose(0.0, RigidTransform.from_yaw(math.pi / 2)), FramePose(1.0, RigidTransform()))
        ref = rotation_oracle(g)
        rot_ok &= bool(np.array_equal(rot.ids, ref.ids) and np.array_equal(rot.features, ref.features))
    return {"name": "temporal", "instances": n, "integer_shift_exact": shift_ok, "rotation_exact": rot_ok,
            "passed": shift_ok and rot_ok}


def suite_sparsity_accounting(seed: int, n: int = 20) -> dict:
    worst = 0.0
    for i in range(n):
        a = random_sparse_grid(derive_seed(seed, "acct-a", i), channels=3)
        b = random_sparse_grid(derive_seed(seed, "acct-b", i), channels=5)
        fused = concat_fuse(a, b)
        union = np.union1d(a.active_ids(), b.active_ids())
        worst = max(worst, abs(fused.sparsity() - (1.0 - len(union) / fused.n_cells)))
    return {"name": "sparsity_accounting", "instances": n, "max_abs_err": worst, "passed": worst <= 1e-12}


def suite_parallel_determinism(seed: int, threads: int) -> dict:
    """Compare serial and threaded outputs of every module with a parallel path."""
    par = max(2, threads)
    checks = {}
    cams, imgs, dists, fgs, k, bins, grid = random_lift_instance(derive_seed(seed, "par"), n_cams=4)
    table = build_pooling_index(cams, imgs[0].hf, imgs[0].wf, bins, grid, imgs[0].stride)
    checks["lift_sparse"] = grid_digest(lift_sparse(imgs, dists, fgs, k, table, 1)) == grid_digest(
        lift_sparse(imgs, dists, fgs, k, table, par))
    r = _rng(seed, "cloud")
    pc = PointCloud(r.uniform(-4.0, 4.0, 3 * 20000).reshape(-1, 3), r.uniform(size=20000))
    vspec = VoxelSpec3D.centered(4.0, (0.2, 0.2, 0.2), (-4.0, 4.0))
    checks["voxelize"] = grid_digest(voxelize(pc, vspec, threads=1)[0]) == grid_digest(
        voxelize(pc, vspec, threads=par)[0])
    g = random_sparse_grid(derive_seed(seed, "par-grid"), n=96, channels=8)
    cfg = default_encoder_config(8, 16, seed)
    checks["encode"] = grid_digest(encode(g, cfg, 1)) == grid_digest(encode(g, cfg, par))
    hm = Heatmap(g.spec, g.ids, np.abs(g.features[:, :3]).astype(np.float64) / 4.0)
    checks["select_peaks"] = select_peaks(hm, 2, 0.1, 1000, 1) == select_peaks(hm, 2, 0.1, 1000, par)
    spec = GridSpec2D.centered(9.6, 0.6)
    buf = TemporalBuffer(3)
    for j in range(3):
        buf.push(random_sparse_grid(derive_seed(seed, "hist", j), channels=4, spec=spec),
                 FramePose(float(j), RigidTransform.from_yaw(0.1 * j, (0.7 * j, 0.2, 0.0))))
    cur = random_sparse_grid(derive_seed(seed, "cur"), channels=4, spec=spec)
    pose = FramePose(3.0, RigidTransform.from_yaw(0.3, (2.1, 0.4, 0.0)))
    checks["merge_temporal"] = grid_digest(merge_temporal(buf, cur, pose, None, 1)) == grid_digest(
        merge_temporal(buf, cur, pose, None, par))
    return {"name": "parallel_determinism", "checks": checks, "passed": all(checks.values())}


def run_all(seed: int = 0, threads: int = 1, quick: bool = False,
            progress: Optional[Callable[[str], None]] = None) -> tuple[dict, str]:
    """Run every suite; returns ``(report, detections_jsonl)``."""
    n = 20 if quick else 200
    suites: list[dict] = []
    steps = [
        lambda: suite_lift_equivalence(seed, n),
        lambda: suite_full_mask_identity(seed, 5 if quick else 20),
        lambda: suite_frustum_occupancy(seed),
        lambda: suite_sparse_conv(seed, n),
        lambda: suite_temporal(seed),
        lambda: suite_sparsity_accounting(seed),
        lambda: suite_parallel_determinism(seed, threads),
    ]
    for step in steps:
        suites.append(step())
        if progress:
            progress(f"{suites[-1]['name']}: {'ok' if suites[-1]['passed'] else 'FAILED'}")
    e2e, jsonl = suite_end_to_end(seed, 2 if quick else 10, threads)
    suites.append(e2e)
    if progress:
        progress(f"end_to_end: {'ok' if e2e['passed'] else 'FAILED'}")
    report = {"seed": seed, "quick": quick, "suites": suites, "passed": all(s["passed"] for s in suites)}
    return report, jsonl
