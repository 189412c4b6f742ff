"""``sparsebev`` command line.

    sparsebev run       [--config cfg.json] [--seed N] [--dense-oracle] [--out DIR] [--threads N]
    sparsebev sweep     [--config bench.json] [--seed N] [--out DIR] [--threads N] [--quick]
    sparsebev verify    [--seed N] [--out DIR] [--threads N] [--quick]
    sparsebev crossover REPORT [--out DIR]

``run`` configs are JSON objects with optional ``"scene"`` and ``"pipeline"``
sections whose keys mirror :class:`SceneConfig` and :class:`PipelineConfig`.
``sweep`` configs mirror :class:`BenchConfig`.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .bench import (BenchConfig, BenchReport, PipelineConfig, check_configs, config_hash, crossover_analysis,
                    process_frame, render_frame, sweep)
from .head import evaluate, write_detections
from .sim import SceneConfig, generate_scene
from .temporal import TemporalBuffer
from .verify import run_all

DEFAULT_SCENE = {"range_m": 40.0, "n_objects": 20, "occlusion_free": True}


def _load_json(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    cfg = _load_json(args.config)
    scene_d = {**DEFAULT_SCENE, **cfg.get("scene", {})}
    pipe_d = dict(cfg.get("pipeline", {}))
    if args.seed is not None:
        scene_d["seed"] = args.seed
    scfg = SceneConfig.from_dict(scene_d)
    pcfg = PipelineConfig.from_dict(pipe_d)
    pcfg = replace(pcfg, threads=args.threads, dense=args.dense_oracle or pcfg.dense)
    check_configs(scfg, pcfg)
    if pcfg.history_frames >= scfg.n_frames and pcfg.history_frames:
        scfg = replace(scfg, n_frames=pcfg.history_frames + 1)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = generate_scene(scfg)
    scene.save(out)
    buffer = TemporalBuffer(pcfg.history_frames) if pcfg.history_frames else None
    frames, rows = [], []
    for f in range(scfg.n_frames):
        fr = render_frame(scene, f, pcfg)
        dets, row, _ = process_frame(fr, scfg, pcfg, buffer)
        ev = evaluate(dets, fr.gts, pcfg.match_radius)
        row.update({"frame": f, "precision": ev.precision, "recall": ev.recall, "ap": ev.ap})
        frames.append((f, dets))
        rows.append(row)
    h = config_hash(scfg, pcfg)
    write_detections(out / "detections.jsonl", frames, h)
    _dump(out / "report.json", {"config_hash": h, "scene": scfg.to_dict(), "pipeline": pcfg.to_dict(),
                                "frames": rows})
    last = rows[-1]
    print(f"frames={len(rows)} detections={last['n_detections']} precision={last['precision']:.3f} "
          f"recall={last['recall']:.3f} S_cam={last['s_cam']:.4f} S_fuse={last['s_fuse']:.4f} "
          f"total={last['t_total_ms']:.1f}ms -> {out}")
    return 0


def cmd_sweep(args) -> int:
    d = _load_json(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    d.setdefault("threads", args.threads)
    if args.quick:
        d.setdefault("range_m", [20.0])
        d.setdefault("k_values", [1])
        d.setdefault("encoder_sparsities", [0.5, 0.9])
        d.setdefault("encoder_grid", 96)
    rep = sweep(BenchConfig.from_dict(d), progress=lambda m: print(m, file=sys.stderr))
    csv_path, json_path = rep.write(args.out)
    print(f"{len(rep.rows)} configurations -> {csv_path}, {json_path}")
    if rep.crossover:
        print(f"crossover sparsity {rep.crossover['crossover_sparsity']:.3f} ({rep.crossover['flag']})")
    return 0


def cmd_verify(args) -> int:
    report, jsonl = run_all(args.seed or 0, args.threads, args.quick,
                            progress=lambda m: print(m, file=sys.stderr))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "verify_report.json", report)
    (out / "detections.jsonl").write_text(jsonl)
    print("verify:", "PASSED" if report["passed"] else "FAILED")
    return 0 if report["passed"] else 1


def cmd_crossover(args) -> int:
    rep = BenchReport.load(args.report)
    res = crossover_analysis(rep)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "crossover.json", res)
    print(f"crossover sparsity {res['crossover_sparsity']:.3f} ({res['flag']})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsebev", description="Sparse BEV fusion pipeline and benchmarks")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default="out")
        sp.add_argument("--threads", type=int, default=1)

    r = sub.add_parser("run", help="simulate and run the end-to-end pipeline")
    common(r)
    r.add_argument("--dense-oracle", action="store_true", help="use the dense lift and dense convolutions")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep", help="benchmark sweep, writes CSV and JSON")
    common(s)
    s.add_argument("--quick", action="store_true", help="small default axes")
    s.set_defaults(fn=cmd_sweep)

    v = sub.add_parser("verify", help="run the oracle-equivalence suites")
    common(v, config=False)
    v.add_argument("--quick", action="store_true", help="fewer random instances")
    v.set_defaults(fn=cmd_verify)

    c = sub.add_parser("crossover", help="sparse/dense encoder crossover of a sweep report")
    c.add_argument("report", help="report.json written by sweep")
    c.add_argument("--out", default=None)
    c.set_defaults(fn=cmd_crossover)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
