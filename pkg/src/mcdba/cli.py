"""Command-line driver: ``simulate``, ``solve``, ``eval`` and ``graph``.

Exit codes: 0 success, 1 runtime failure, 2 validation failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .covis import CovisGraph, EdgeKind, FrameId, exhaustive_edges
from .errors import IoError, McdbaError, MismatchedFrames, ValidationError
from .io import (
    depth_name,
    json_text,
    load_scene,
    read_grid,
    read_json,
    read_mask,
    read_text,
    save_scene,
    trajectory_from_text,
    trajectory_to_text,
    write_grid,
    write_mask,
    write_text,
)
from .metrics import ate, depth_metrics, median_scale
from .pipeline import GroundTruthDepth, GroundTruthPose, OracleFlowProvider, run_pipeline
from .simulator import make_scene, oracle_targets

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    return out


def all_graph_edges(rig, params, n_steps: int) -> dict:
    """Every edge the incremental graph holds at some step over ``0..n_steps-1``."""
    g = CovisGraph(rig, params)
    edges = {}
    for t in range(n_steps):
        g.update(t)
        edges.update(g.edges)
    return edges


def cmd_simulate(cfg: RunConfig, out: Path) -> list[Path]:
    scene = make_scene(cfg.rig, cfg.trajectory, cfg.scene.depth_range, cfg.seed, cfg.noise)
    edges = all_graph_edges(scene.rig, cfg.graph, scene.n_steps)
    meas = oracle_targets(scene.rig, scene.poses, scene.depths, sorted(edges), scene.noise)
    save_scene(scene, out, edges, meas, cfg.echo())
    lines = "".join(f"{i.t} {i.c} {j.t} {j.c} {edges[(i, j)].value}\n" for i, j in sorted(edges))
    write_text(out / "edges.txt", lines)
    return [out / "manifest.json"]


def cmd_solve(bundle: Path, cfg: RunConfig, out: Path, seed: int | None = None) -> list[Path]:
    scene, manifest = load_scene(bundle)
    seed = scene.seed if seed is None else seed
    noise = scene.noise
    provider = OracleFlowProvider(scene, noise)
    depth_init = GroundTruthDepth(scene, noise.depth_rel_sigma, seed)
    pose_init = GroundTruthPose(scene, noise.pose_sigma, seed)
    result = run_pipeline(range(scene.n_steps), scene.rig, cfg.pipeline_config(), provider, depth_init, pose_init)

    (out / "depth").mkdir(exist_ok=True)
    (out / "mask").mkdir(exist_ok=True)
    write_text(out / "trajectory.tum", trajectory_to_text(result.trajectory))
    for frame, d in result.depths.items():
        write_grid(out / "depth" / depth_name(frame), d)
        seen = result.observed.get(frame, np.zeros(d.shape, dtype=bool))
        write_mask(out / "mask" / depth_name(frame), seen)
    log = "".join(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n" for rec in result.energy_log)
    write_text(out / "energy_log.jsonl", log)
    bundle_hash = hashlib.sha256(read_text(Path(bundle) / "manifest.json").encode()).hexdigest()
    run = {
        "command": "solve",
        "seed": seed,
        "bundle_manifest_sha256": bundle_hash,
        "keyframes": result.keyframes,
        "removed": result.removed,
        "config": cfg.echo(),
    }
    write_text(out / "manifest.json", json_text(run))
    return [out / "trajectory.tum", out / "energy_log.jsonl", out / "manifest.json"]


def load_prediction(pred_dir: Path, scene):
    """Trajectory, inverse depths and masks of a solve output.

    Frames rejected during warmup have no estimate, so the evaluated set is the
    prediction's own timesteps; each must exist in the ground truth.
    """
    traj = trajectory_from_text(read_text(pred_dir / "trajectory.tum"))
    extra = sorted(set(traj) - set(range(scene.n_steps)))
    if not traj or extra:
        raise MismatchedFrames(f"prediction timesteps {extra or 'none'} are not in the ground truth")
    depths, masks = {}, {}
    for frame in sorted(f for f in scene.depths if f.t in traj):
        path = pred_dir / "depth" / depth_name(frame)
        if not path.exists():
            raise MismatchedFrames(f"prediction has no depth for {frame}")
        d = read_grid(path)[..., 0].astype(np.float64)
        if d.shape != scene.depths[frame].shape:
            raise MismatchedFrames(f"depth {frame} has shape {d.shape}")
        depths[frame] = d
        mpath = pred_dir / "mask" / depth_name(frame)
        masks[frame] = read_mask(mpath) if mpath.exists() else np.ones(d.shape, dtype=bool)
    return traj, depths, masks


def evaluate(scene, traj, inv_depths, masks, scaled: bool = False, median_scaled: bool = False, align: bool = False) -> dict:
    """Metric report for a prediction against a scene; inverse depths are converted to depth."""
    frames = sorted(inv_depths)
    pred = {f: np.where(inv_depths[f] > 0, 1.0 / np.maximum(inv_depths[f], 1e-300), 0.0) for f in frames}
    if any(f not in scene.depths for f in frames):
        raise MismatchedFrames("prediction has frames missing from the ground truth")
    gt = {f: 1.0 / scene.depths[f] for f in frames}
    valid = {f: masks[f] & (inv_depths[f] > 0) for f in frames}
    s = 1.0
    if median_scaled:
        cams = sorted({f.c for f in frames})
        per_cam = lambda src: {c: np.concatenate([src[f][valid[f]] for f in frames if f.c == c]) for c in cams}  # noqa: E731
        s = median_scale(per_cam(pred), per_cam(gt))
    dm = depth_metrics([s * pred[f] for f in frames], [gt[f] for f in frames], [valid[f] for f in frames], cameras=[f.c for f in frames])
    ts = sorted(traj)
    te = ate([traj[t] for t in ts], [scene.poses[t] for t in ts], scaled=scaled, align=align)
    return {
        "depth": dm.as_record(),
        "depth_per_camera": {str(c): e.as_record() for c, e in dm.per_camera.items()},
        "depth_scale": s,
        "trajectory": te.as_record(),
        "flags": {"scaled": scaled, "median_scaled": median_scaled, "align": align},
    }


def report_text(report: dict) -> str:
    lines = [f"depth_scale: {report['depth_scale']!r}"]
    lines += [f"depth.{k}: {v!r}" for k, v in report["depth"].items()]
    for c, rec in report["depth_per_camera"].items():
        lines += [f"camera_{c}.{k}: {v!r}" for k, v in rec.items()]
    lines += [f"trajectory.{k}: {v!r}" for k, v in report["trajectory"].items()]
    return "\n".join(lines) + "\n"


def cmd_eval(pred_dir: Path, bundle: Path, out: Path, scaled=False, median_scaled=False, align=False) -> list[Path]:
    scene, _ = load_scene(bundle)
    traj, depths, masks = load_prediction(Path(pred_dir), scene)
    report = evaluate(scene, traj, depths, masks, scaled, median_scaled, align)
    write_text(out / "report.txt", report_text(report))
    write_text(out / "report.json", json_text(report))
    return [out / "report.txt", out / "report.json"]


def graph_counts(rig, params, n_steps: int):
    """Per-step edge counts by kind for the incremental graph and the exhaustive baseline."""
    g = CovisGraph(rig, params)
    rows = []
    for t in range(n_steps):
        g.update(t)
        kinds = {k.value: 0 for k in EdgeKind}
        for kind in g.edges.values():
            kinds[kind.value] += 1
        rows.append({"t": t, "ours": kinds, "ours_total": len(g.edges), "exhaustive_total": len(exhaustive_edges(g.nodes))})
    return g, rows


def cmd_graph(cfg: RunConfig, out: Path, n_steps: int | None = None) -> list[Path]:
    from .simulator import make_rig

    n = cfg.trajectory.n_steps if n_steps is None else n_steps
    g, rows = graph_counts(make_rig(cfg.rig), cfg.graph, n)
    write_text(out / "graph.txt", g.dump())
    table = "t temporal spatial spatial_temporal ours exhaustive\n"
    for r in rows:
        k = r["ours"]
        table += f"{r['t']} {k['temporal']} {k['spatial']} {k['spatial_temporal']} {r['ours_total']} {r['exhaustive_total']}\n"
    write_text(out / "counts.txt", table)
    write_text(out / "counts.json", json_text({"steps": rows, "config": cfg.echo()}))
    return [out / "graph.txt", out / "counts.txt", out / "counts.json"]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcdba", description="Multi-camera dense bundle adjustment experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, default=None, help="INI run configuration")
        sp.add_argument("--seed", type=int, default=None, help="override the configured seed")
        sp.add_argument("--out", type=Path, required=True, help="output directory")

    common(sub.add_parser("simulate", help="write a synthetic scene bundle"))
    sp = sub.add_parser("solve", help="run the incremental pipeline on a bundle")
    sp.add_argument("bundle", type=Path)
    common(sp)
    sp = sub.add_parser("eval", help="score a solve output against a bundle")
    sp.add_argument("pred", type=Path)
    sp.add_argument("bundle", type=Path)
    sp.add_argument("--scaled", action="store_true", help="least-squares trajectory scale")
    sp.add_argument("--median-scaled", action="store_true", help="camera-wise median depth scaling")
    sp.add_argument("--align", action="store_true", help="rigid trajectory alignment before scoring")
    common(sp)
    sp = sub.add_parser("graph", help="dump the co-visibility graph and edge counts")
    sp.add_argument("--n-steps", type=int, default=None)
    common(sp)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        cfg = _config(args)
        out = _outdir(args.out)
        if args.command == "simulate":
            paths = cmd_simulate(cfg, out)
        elif args.command == "solve":
            paths = cmd_solve(args.bundle, cfg, out, args.seed)
        elif args.command == "eval":
            paths = cmd_eval(args.pred, args.bundle, out, args.scaled, args.median_scaled, args.align)
        else:
            paths = cmd_graph(cfg, out, args.n_steps)
    except (ValidationError, MismatchedFrames) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (McdbaError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for path in paths:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
