import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from sparsebev.bench import (CSV_COLUMNS, BenchConfig, BenchReport, PipelineConfig, camera_sparsity, check_configs,
                             config_hash, crossover_analysis, dense_cell_count, render_frame, run_pipeline, sweep,
                             synthetic_fg_mask, synthetic_grid)
from sparsebev.encoder import build_rulebook
from sparsebev.sim import SceneConfig, generate_scene

SCENE = SceneConfig(range_m=20.0, n_objects=5, seed=1, occlusion_free=True)


def test_pipeline_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        PipelineConfig(k=0)
    with pytest.raises(ValueError):
        PipelineConfig(encoder="resnet")
    p = PipelineConfig(k=None, voxel_cell=(0.15, 0.15, 0.2))
    assert PipelineConfig.from_dict(json.loads(json.dumps(p.to_dict()))) == p


def test_check_configs():
    with pytest.raises(ValueError):
        check_configs(SCENE, PipelineConfig(n_classes=4))
    with pytest.raises(ValueError):
        check_configs(SCENE, PipelineConfig(cell_size=0.5, voxel_cell=(0.075, 0.075, 0.2)))


def test_config_hash_ignores_threads_and_mode():
    p = PipelineConfig()
    assert config_hash(SCENE, p) == config_hash(SCENE, replace(p, threads=4, dense=True))
    assert config_hash(SCENE, p) != config_hash(SCENE, replace(p, k=2))


def test_synthetic_inputs_exact():
    g = synthetic_grid(50, 4, 0.92, seed=3)
    assert g.active_count == 200
    assert g.sparsity() == pytest.approx(0.92)
    m = synthetic_fg_mask((10, 20), 0.25, seed=1)
    assert m.sum() == 50


def test_synthetic_patterns():
    dil = {}
    for pattern in ("clustered", "uniform"):
        g = synthetic_grid(96, 2, 0.9, seed=5, pattern=pattern)
        assert g.active_count == round(0.1 * 96 * 96)
        dil[pattern] = len(build_rulebook(g.spec, g.ids, 3, "regular", 1).out_ids) / g.active_count
    # clustered occupancy dilates less under a regular 3x3 conv
    assert dil["clustered"] < 0.8 * dil["uniform"]
    with pytest.raises(ValueError):
        synthetic_grid(8, 1, 0.5, seed=0, pattern="stripes")


def test_dense_cell_count():
    assert dense_cell_count(200.0, 0.6) == 444_889
    assert dense_cell_count(100.0, 0.5) * 4 == dense_cell_count(200.0, 0.5)


def test_run_pipeline_row():
    dets, row = run_pipeline(SCENE, PipelineConfig())
    assert (row["precision"], row["recall"]) == (1.0, 1.0)
    assert len(dets) == 5
    assert abs(row["s_fuse"] - row["s_fuse_union"]) <= 1e-12
    assert row["dense_bytes"] == row["n_cells"] * row["channels"] * 4
    assert row["sparse_bytes"] == row["active_fused"] * (row["channels"] * 4 + 16)
    assert all(row[f"t_{s}_ms"] >= 0 for s in ("view", "lidar", "fuse", "encoder", "head"))
    scene = generate_scene(SCENE)
    s_cam, occ = camera_sparsity(render_frame(scene, 0, PipelineConfig()), SCENE, PipelineConfig())
    assert s_cam == row["s_cam"] and occ == row["frustum_occupancy"]


def test_run_pipeline_threads_identical():
    a, ra = run_pipeline(SCENE, PipelineConfig())
    b, rb = run_pipeline(SCENE, PipelineConfig(threads=4))
    assert [d.to_dict() for d in a] == [d.to_dict() for d in b]
    assert ra["s_fuse"] == rb["s_fuse"]


def test_run_pipeline_with_history():
    scfg = replace(SCENE, n_frames=3)
    dets, row = run_pipeline(scfg, PipelineConfig(history_frames=2), frame=2)
    assert row["recall"] == 1.0
    assert row["t_temporal_ms"] > 0


def test_default_encoder_runs():
    _, row = run_pipeline(SCENE, PipelineConfig(encoder="default", encoder_width=8, score_threshold=0.99))
    assert row["channels"] > 0


def test_crossover_constructed():
    # sparse time = 2 (1 - s) t, dense time = t: the two meet at s = 0.5
    rows = [{"sparsity": s, "t_sparse_ms": 2 * (1 - s), "t_dense_ms": 1.0} for s in (0.2, 0.4, 0.6, 0.8)]
    res = crossover_analysis(rows)
    assert res["flag"] == "interpolated"
    assert res["crossover_sparsity"] == pytest.approx(0.5)
    fast = [{"sparsity": s, "t_sparse_ms": 0.5, "t_dense_ms": 1.0} for s in (0.2, 0.8)]
    assert crossover_analysis(fast) == {"sparsity": [0.2, 0.8], "ratio": [0.5, 0.5],
                                        "crossover_sparsity": 0.2, "flag": "sparse_faster_everywhere"}
    slow = [{"sparsity": s, "t_sparse_ms": 2.0, "t_dense_ms": 1.0} for s in (0.2, 0.8)]
    assert crossover_analysis(slow)["flag"] == "dense_faster_everywhere"
    with pytest.raises(ValueError):
        crossover_analysis([])


def test_bench_config_validation():
    with pytest.raises(ValueError):
        BenchConfig(repetitions=2)
    with pytest.raises(ValueError):
        BenchConfig(range_m=[-1.0])
    with pytest.raises(ValueError):
        BenchConfig(modes=["gpu"])


def test_small_sweep_outputs(tmp_path):
    b = BenchConfig(range_m=[20.0], k_values=[1, 4], modes=["sparse", "dense"], n_objects=5,
                    encoder_sparsities=[0.5, 0.95], encoder_grid=48, encoder_channels=8)
    rep = sweep(b)
    assert len(rep.rows) == 4
    by = {(r["k"], r["mode"]): r for r in rep.rows}
    assert by[(1, "sparse")]["s_cam"] == by[(1, "dense")]["s_cam"]
    assert by[(1, "sparse")]["s_cam"] >= by[(4, "sparse")]["s_cam"]
    csv_path, json_path = rep.write(tmp_path)
    with open(csv_path) as fh:
        reader = csv.reader(fh)
        assert next(reader) == CSV_COLUMNS
        assert len(list(reader)) == 4
    back = BenchReport.load(json_path)
    assert back.rows == json.loads(json.dumps(rep.rows))
    assert back.crossover["flag"] in ("interpolated", "sparse_faster_everywhere", "dense_faster_everywhere")
    assert (tmp_path / "encoder_sweep.csv").exists()
