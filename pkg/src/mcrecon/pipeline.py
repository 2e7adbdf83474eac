"""Replayable experiment stages: generate, track, refine, eval, run, stats.

A run lives in one output directory::

    config.ini              resolved configuration
    flows.mcrf              flow cache shared by tracking and refinement
    gt/                     trajectory_c<k>.txt, depth/c<k>_t<nnnnn>.mcrd, flow_manifest.json
    track/                  estimated trajectories, depth/ (aligned mono), ba_depth/,
                            log.jsonl, edges.json, edge_stats.json
    refine/                 trajectories, depth/, loss.jsonl
    <stage>/metrics.json    written by eval
    report.json             written by run
    points/                 PLY clouds written by stats

Every stage reads its inputs from disk, so any stage can be rerun alone.
"""

import json
import logging
import time
from pathlib import Path

import numpy as np

from . import evaluation
from .config import dump_config
from .errors import FormatError, McrError, StageFailure
from .formats import (
    CachedFlow,
    read_depth,
    read_flows,
    read_trajectory,
    trajectory_records,
    write_depth,
    write_flows,
    write_ply,
    write_trajectory,
)
from .frames import FrameId
from .geometry import pixel_grid
from .graph import edge_stats
from .refinement import RefineState, build_refine_graph, refine, refine_view
from .synthetic import OracleFlow, OracleInitPrior, OracleMonoDepth, generate_scene
from .tracking import track_step, wide_baseline_init

log = logging.getLogger(__name__)

FLOW_CACHE = "flows.mcrf"
TIMING_KEYS = ("timings_s",)


def _json_default(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple) and hasattr(v, "_fields"):
        return list(v)
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _dump_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _dump_jsonl(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    text = "".join(json.dumps(r, sort_keys=True, default=_json_default) + "\n" for r in rows)
    Path(path).write_text(text, encoding="utf-8")


def _traj_path(d, cam):
    return Path(d) / f"trajectory_c{cam}.txt"


def _depth_path(d, f, sub="depth"):
    return Path(d) / sub / f"c{f.camera}_t{f.time:05d}.mcrd"


def _frames(cfg):
    n = len(cfg.rig_spec().cameras)
    return [FrameId(c, t) for c in range(n) for t in range(cfg.scene.duration)]


def _write_estimate(d, poses, depths, valid, cfg, sub="depth"):
    n = len(cfg.rig_spec().cameras)
    for c in range(n):
        write_trajectory(_traj_path(d, c), trajectory_records(poses, c, cfg.scene.fps))
    for f in sorted(depths):
        write_depth(_depth_path(d, f, sub), depths[f], None if valid is None else valid[f])


def read_estimate(d, cfg):
    """``(records, poses, depths, valid)`` for a stage directory, checked against ``cfg``."""
    d = Path(d)
    n = len(cfg.rig_spec().cameras)
    records, poses, depths, valid = {}, {}, {}, {}
    for c in range(n):
        path = _traj_path(d, c)
        recs = read_trajectory(path)
        if len(recs) != cfg.scene.duration:
            raise FormatError(path, f"length mismatch: {len(recs)} poses, expected {cfg.scene.duration}")
        records[c] = recs
        for r in recs:
            t = int(round(r.timestamp * cfg.scene.fps))
            poses[FrameId(c, t)] = r.pose()
        if sorted(f.time for f in poses if f.camera == c) != list(range(cfg.scene.duration)):
            raise FormatError(path, "timestamps do not map onto frames 0..duration-1")
    for f in sorted(poses):
        depths[f], valid[f] = read_depth(_depth_path(d, f))
    return records, poses, depths, valid


class FileGroundTruth:
    """Ground-truth view backed by the files under ``gt/``."""

    def __init__(self, root, cfg):
        _, self.poses, self.depths, self.valid = read_estimate(Path(root) / "gt", cfg)
        self.rig = cfg.rig_spec()

    def intrinsics(self, camera):
        return self.rig.cameras[camera].intrinsics

    def pose(self, f):
        return self.poses[FrameId(*f)]

    def depth_of(self, f):
        return self.depths[FrameId(*f)]

    def valid_of(self, f):
        return self.valid[FrameId(*f)]


def _scene(cfg):
    return generate_scene(cfg.scene_spec(), cfg.rig_spec(), seed=cfg.seed)


def _flow_provider(cfg, gt, root):
    path = Path(root) / FLOW_CACHE
    flows = read_flows(path) if path.exists() else {}
    return CachedFlow(flows, OracleFlow(gt, cfg.noise, cfg.seed))


# ------------------------------------------------------------------ stages


def cmd_generate(cfg, gt=None):
    root = cfg.output_dir
    gt = gt or _scene(cfg)
    dump_config(cfg, root / "config.ini")
    poses = {f: gt.pose(f) for f in gt.frames()}
    depths = {f: gt.depth_of(f) for f in gt.frames()}
    valid = {f: gt.valid_of(f) for f in gt.frames()}
    _write_estimate(root / "gt", poses, depths, valid, cfg)
    write_flows(root / FLOW_CACHE, {})
    manifest = {
        "cache": FLOW_CACHE,
        "format": "MCRF",
        "version": 1,
        "provider": "oracle",
        "seed": cfg.seed,
        "flow_noise": cfg.noise.flow_noise,
        "dynamic_weight": cfg.noise.dynamic_weight,
        "key": "src_camera src_time dst_camera dst_time",
    }
    _dump_json(root / "gt" / "flow_manifest.json", manifest)
    return {"frames": len(poses), "cameras": gt.n_cameras}


def _require(path, what):
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")


def cmd_track(cfg, gt=None):
    root = cfg.output_dir
    _require(root / "gt" / "flow_manifest.json", "scene bundle")
    gt = gt or _scene(cfg)
    tcfg = cfg.tracker_config()
    flow = _flow_provider(cfg, gt, root)
    prior = OracleInitPrior(gt, cfg.noise, cfg.seed)
    mono = OracleMonoDepth(gt, cfg.noise, cfg.seed)
    K = [gt.intrinsics(c) for c in range(gt.n_cameras)]
    try:
        session = wide_baseline_init(gt.n_cameras, K, prior, mono, flow, tcfg)
    except McrError as exc:
        raise StageFailure("track", "initialisation", exc) from exc
    for t in range(tcfg.n_init, cfg.scene.duration):
        try:
            track_step(session, t)
        except McrError as exc:
            raise StageFailure("track", f"frame t={t}", exc) from exc

    out = root / "track"
    poses = session.poses()
    prior_depth = {f: s.prior_depth for f, s in session.states.items()}
    valid = {f: s.valid for f, s in session.states.items()}
    _write_estimate(out, poses, prior_depth, valid, cfg)
    for f, s in session.states.items():
        write_depth(_depth_path(out, f, "ba_depth"), s.depth, s.valid)
    _dump_jsonl(out / "log.jsonl", session.records)
    edges = sorted(session.graph.history)
    _dump_json(out / "edges.json", [[s.camera, s.time, d.camera, d.time] for s, d in edges])
    stats = {"final": edge_stats(session.graph), "history": edge_stats(session.graph, session.graph.history.values())}
    _dump_json(out / "edge_stats.json", stats)
    write_flows(root / FLOW_CACHE, flow.flows)
    return stats


def cmd_refine(cfg, gt=None):
    root = cfg.output_dir
    src, out = root / "track", root / "refine"
    _require(src / "edges.json", "tracked outputs")
    records, poses, depths, valid = read_estimate(src, cfg)
    a = cfg.ablation
    phase1, phase2 = not a.skip_phase1, not a.skip_phase2
    if not (phase1 or phase2):
        # nothing to optimise: the decoded inputs re-encode to identical bytes
        for c, recs in records.items():
            write_trajectory(_traj_path(out, c), recs)
        for f in sorted(depths):
            write_depth(_depth_path(out, f), depths[f], valid[f])
        _dump_jsonl(out / "loss.jsonl", [])
        return {"phase1_loss": None, "phase2_history": None}

    gt = gt or _scene(cfg)
    flow = _flow_provider(cfg, gt, root)
    pairs = [(FrameId(a_, b_), FrameId(c_, d_)) for a_, b_, c_, d_ in json.loads((src / "edges.json").read_text())]
    counts = {c: cfg.scene.duration for c in range(gt.n_cameras)}
    graph = build_refine_graph(pairs, counts, cfg.refine.temporal_offsets, flow)
    K = [gt.intrinsics(c) for c in range(gt.n_cameras)]
    state = RefineState.from_maps(poses, depths, K, valid)
    try:
        res = refine(graph, state, cfg.refine, phase1=phase1, phase2=phase2, joint=a.joint_opt)
    except McrError as exc:
        ctx = f"{exc.phase} iteration {exc.iteration}" if hasattr(exc, "phase") else "optimisation"
        raise StageFailure("refine", ctx, exc) from exc
    views = {f: refine_view(state, f) for f in state.frames}
    _write_estimate(out, {f: v.pose for f, v in views.items()}, {f: v.depth for f, v in views.items()}, None, cfg)
    _dump_jsonl(out / "loss.jsonl", res.records)
    write_flows(root / FLOW_CACHE, flow.flows)
    return {"phase1_loss": res.phase1_loss, "phase2_history": res.phase2_history, "edges": len(graph)}


def cmd_eval(cfg, stage="refine"):
    """Score ``<output>/<stage>`` against ``<output>/gt`` and write ``metrics.json``."""
    root = cfg.output_dir
    gt = FileGroundTruth(root, cfg)
    _, poses, depths, _ = read_estimate(root / stage, cfg)
    frames = sorted(gt.poses)
    missing = [f for f in frames if f not in poses]
    if missing or len(poses) != len(frames):
        raise FormatError(root / stage, f"length mismatch: {len(poses)} estimated frames vs {len(frames)} ground truth")
    report = evaluation.evaluate(poses, depths, gt, frames)
    out = report.to_dict()
    cams = evaluation.per_camera(poses, depths, gt, report.alignment, frames)
    out["per_camera"] = cams
    keys = ("ate_m", "abs_rel", "delta_125", "md_m")
    out["per_camera_mean"] = {k: float(np.mean([row[k] for row in cams.values()])) for k in keys}
    out["per_camera_mean_note"] = "unweighted mean over cameras; top-level values pool all frames"
    out["stage"] = stage
    out["config_hash"] = cfg.config_hash()
    _dump_json(root / stage / "metrics.json", out)
    return out


def cmd_run(cfg):
    """generate -> track -> refine -> eval with one report."""
    root = cfg.output_dir
    timings = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = now - clock
        clock = now

    gt = _scene(cfg)
    cmd_generate(cfg, gt)
    lap("generate")
    stats = cmd_track(cfg, gt)
    lap("track")
    refined = cmd_refine(cfg, gt)
    lap("refine")
    tracked = cmd_eval(cfg, "track")
    final = cmd_eval(cfg, "refine")
    lap("eval")
    report = dict(final)
    report["tracked"] = {k: v for k, v in tracked.items() if k not in ("config_hash", "stage")}
    report["edge_stats"] = stats
    report["refinement"] = {"phase1_loss": refined["phase1_loss"], "phase2_history": refined["phase2_history"]}
    report["ablation"] = {k: getattr(cfg.ablation, k) for k in cfg.ablation.__dataclass_fields__}
    report["timings_s"] = timings
    _dump_json(root / "report.json", report)
    return report


def comparable(report):
    """Report without wall-clock fields, for rerun comparisons."""
    return {k: v for k, v in report.items() if k not in TIMING_KEYS}


def cmd_stats(cfg, stage="refine"):
    """One PLY cloud per timestamp of ``stage`` (all cameras, world frame) plus graph stats."""
    root = cfg.output_dir
    _, poses, depths, valid = read_estimate(root / stage, cfg)
    rig = cfg.rig_spec()
    written = []
    for t in range(cfg.scene.duration):
        pts = []
        for c, cam in enumerate(rig.cameras):
            f = FrameId(c, t)
            K = cam.intrinsics
            m = valid[f]
            rays = K.rays(pixel_grid(K.height, K.width))[m]
            pts.append(poses[f].apply(rays * depths[f][m][:, None]))
        path = root / "points" / f"{stage}_t{t:05d}.ply"
        write_ply(path, np.concatenate(pts) if pts else np.zeros((0, 3)))
        written.append(str(path))
    summary = {"stage": stage, "clouds": len(written)}
    es = root / "track" / "edge_stats.json"
    if es.exists():
        summary["edge_stats"] = json.loads(es.read_text())
    return summary


__all__ = [
    "cmd_generate",
    "cmd_track",
    "cmd_refine",
    "cmd_eval",
    "cmd_run",
    "cmd_stats",
    "comparable",
    "read_estimate",
    "FileGroundTruth",
]
