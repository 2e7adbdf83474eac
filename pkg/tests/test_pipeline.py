import hashlib
import json
import shutil

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from mcrecon import evaluation, pipeline
from mcrecon.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_RUNTIME, main
from mcrecon.config import Ablation, RunConfig
from mcrecon.errors import FormatError, StageFailure
from mcrecon.formats import PoseRecord, read_trajectory, write_depth, write_trajectory
from mcrecon.frames import FrameId

TINY = {
    "scene.duration": 10,
    "rig.width": 32,
    "rig.height": 24,
    "refine.iters_phase1": 20,
    "refine.iters_pose": 8,
    "refine.iters_depth": 8,
    "refine.outer_loops": 1,
}


def tiny(tmp, **extra):
    return RunConfig().with_overrides(**{**TINY, "run.output_dir": str(tmp), **extra})


def checksums(root, sub):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted((root / sub).rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def tracked(tmp_path_factory):
    cfg = tiny(tmp_path_factory.mktemp("tracked"), **{"noise.flow_noise": 0.2, "noise.mono_scale_drift": (0.9, 1.1)})
    pipeline.cmd_generate(cfg)
    stats = pipeline.cmd_track(cfg)
    return cfg, stats


def test_generate_single_camera(tmp_path):
    cfg = tiny(tmp_path, **{"rig.cameras": 1})
    pipeline.cmd_generate(cfg)
    assert (tmp_path / "config.ini").exists() and (tmp_path / "flows.mcrf").exists()
    assert (tmp_path / "gt" / "flow_manifest.json").exists()
    lines = [l for l in (tmp_path / "gt" / "trajectory_c0.txt").read_text().splitlines() if not l.startswith("#")]
    assert len(lines) == 10
    assert not (tmp_path / "gt" / "trajectory_c1.txt").exists()
    assert len(list((tmp_path / "gt" / "depth").glob("*.mcrd"))) == 10


def test_generate_rerun_is_bit_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    pipeline.cmd_generate(tiny(a))
    pipeline.cmd_generate(tiny(b))
    assert checksums(a, "gt") == checksums(b, "gt")
    assert (a / "config.ini").read_bytes().replace(str(a).encode(), b"") == (b / "config.ini").read_bytes().replace(str(b).encode(), b"")


def test_echoed_config_reloads_identically(tmp_path):
    cfg = tiny(tmp_path, **{"noise.flow_noise": 0.3})
    pipeline.cmd_generate(cfg)
    from mcrecon.config import load_config

    assert load_config(tmp_path / "config.ini") == cfg


def test_track_outputs(tracked):
    cfg, stats = tracked
    root = cfg.output_dir
    for c in range(2):
        assert len(read_trajectory(root / "track" / f"trajectory_c{c}.txt")) == 10
    assert len(list((root / "track" / "depth").glob("*.mcrd"))) == 20
    assert len(list((root / "track" / "ba_depth").glob("*.mcrd"))) == 20
    log = [json.loads(l) for l in (root / "track" / "log.jsonl").read_text().splitlines()]
    assert log[0]["step"] == "init" and len(log) == 1 + 10 - cfg.tracker.n_init
    assert stats["final"]["inter_fraction"] > 0


def test_eval_gt_against_itself_is_zero(tracked):
    cfg, _ = tracked
    rep = pipeline.cmd_eval(cfg, "gt")
    for k in ("ate_m", "rte_m", "rre_deg", "abs_rel", "md_m"):
        assert rep[k] < 1e-9, k
    assert rep["delta_125"] == 1.0
    assert rep["alignment"]["scale"] == pytest.approx(1.0, abs=1e-12)
    assert set(rep["per_camera"]) == {"0", "1"}


def test_eval_scaled_fixture_matches_umeyama_unit_values(tracked, tmp_path):
    # poses at half scale with depths halved as well: alignment scale 2, zero error
    cfg, _ = tracked
    root = tmp_path / "fixture"
    shutil.copytree(cfg.output_dir / "gt", root / "gt")
    cfg = cfg.with_overrides(**{"run.output_dir": str(root)})
    _, poses, depths, valid = pipeline.read_estimate(root / "gt", cfg)
    for c in range(2):
        recs = [PoseRecord(r.timestamp, tuple(0.5 * v for v in r.translation), r.quaternion) for r in read_trajectory(root / "gt" / f"trajectory_c{c}.txt")]
        write_trajectory(root / "est" / f"trajectory_c{c}.txt", recs)
    for f in depths:
        write_depth(root / "est" / "depth" / f"c{f.camera}_t{f.time:05d}.mcrd", 0.5 * depths[f], valid[f])
    rep = pipeline.cmd_eval(cfg, "est")
    assert rep["alignment"]["scale"] == pytest.approx(2.0, abs=1e-9)
    assert rep["ate_m"] < 1e-9 and rep["md_m"] < 1e-9 and rep["abs_rel"] < 1e-9
    assert rep["rre_deg"] < 1e-9


def test_eval_matches_in_memory_evaluation(tracked):
    cfg, _ = tracked
    rep = pipeline.cmd_eval(cfg, "track")
    gt = pipeline.FileGroundTruth(cfg.output_dir, cfg)
    _, poses, depths, _ = pipeline.read_estimate(cfg.output_dir / "track", cfg)
    ref = evaluation.evaluate(poses, depths, gt).to_dict()
    for k in ("ate_m", "rte_m", "rre_deg", "abs_rel", "delta_125", "md_m"):
        assert rep[k] == ref[k]
    assert rep["config_hash"] == cfg.config_hash()


def test_refine_noop_is_byte_equal(tracked, tmp_path):
    cfg, _ = tracked
    root = tmp_path / "noop"
    shutil.copytree(cfg.output_dir, root)
    cfg = cfg.with_overrides(**{"run.output_dir": str(root), "ablation.skip_phase1": True, "ablation.skip_phase2": True})
    pipeline.cmd_refine(cfg)
    a = {k.split("/", 1)[1]: v for k, v in checksums(root, "track").items() if "/depth/" in k or "trajectory" in k}
    b = {k.split("/", 1)[1]: v for k, v in checksums(root, "refine").items() if k != "refine/loss.jsonl"}
    assert a == b


def test_refine_writes_loss_curve_and_cache(tracked, tmp_path):
    cfg, _ = tracked
    root = tmp_path / "ref"
    shutil.copytree(cfg.output_dir, root)
    cfg = cfg.with_overrides(**{"run.output_dir": str(root)})
    before = (root / "flows.mcrf").stat().st_size
    out = pipeline.cmd_refine(cfg)
    rows = [json.loads(l) for l in (root / "refine" / "loss.jsonl").read_text().splitlines()]
    assert rows and {r["phase"] for r in rows} >= {"phase1", "phase2-pose-0", "phase2-depth-0"}
    assert (root / "flows.mcrf").stat().st_size > before
    assert out["edges"] > 0


def test_refine_divergence_carries_phase_context(tracked, tmp_path):
    cfg, _ = tracked
    root = tmp_path / "div"
    shutil.copytree(cfg.output_dir, root)
    cfg = cfg.with_overrides(**{"run.output_dir": str(root), "refine.lr_phase2": 50.0, "ablation.skip_phase1": True})
    with pytest.raises(StageFailure, match="phase2-pose-0 iteration"):
        pipeline.cmd_refine(cfg)


def test_non_overlap_has_no_inter_camera_edges(tmp_path):
    cfg = tiny(tmp_path, **{"run.preset": "non-overlap"})
    pipeline.cmd_generate(cfg)
    stats = pipeline.cmd_track(cfg)
    assert stats["history"]["inter_fraction"] == pytest.approx(0.0, abs=0.02)


def test_eval_length_mismatch(tracked, tmp_path):
    cfg, _ = tracked
    root = tmp_path / "short"
    shutil.copytree(cfg.output_dir, root)
    cfg = cfg.with_overrides(**{"run.output_dir": str(root)})
    path = root / "track" / "trajectory_c1.txt"
    write_trajectory(path, read_trajectory(path)[:-1])
    with pytest.raises(FormatError, match="length mismatch"):
        pipeline.cmd_eval(cfg, "track")


@pytest.mark.parametrize("preset", ["overlap", "non-overlap", "three-camera"])
def test_run_preset_matrix(tmp_path, preset):
    rep = pipeline.cmd_run(tiny(tmp_path, **{"run.preset": preset}))
    assert len(rep["config_hash"]) == 16
    assert set(rep["timings_s"]) == {"generate", "track", "refine", "eval"}
    assert rep["edge_stats"]["final"]["total"] > 0
    assert "tracked" in rep and len(rep["per_camera"]) == (3 if preset == "three-camera" else 2)
    assert json.loads((tmp_path / "report.json").read_text())["config_hash"] == rep["config_hash"]


flag_sets = st.fixed_dictionaries({f"ablation.{k}": st.booleans() for k in Ablation.__dataclass_fields__})


@settings(max_examples=5, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(flags=flag_sets)
def test_ablation_flags_compose(tmp_path, flags):
    out = tmp_path / hashlib.sha1(json.dumps(flags, sort_keys=True).encode()).hexdigest()[:8]
    rep = pipeline.cmd_run(tiny(out, **{"scene.duration": 9, **flags}))
    assert rep["ablation"] == {k.split(".")[1]: v for k, v in flags.items()}
    assert np.isfinite(rep["ate_m"])


def test_stats_writes_clouds(tracked):
    cfg, _ = tracked
    summary = pipeline.cmd_stats(cfg, "gt")
    assert summary["clouds"] == 10
    from mcrecon.formats import read_ply

    pts = read_ply(cfg.output_dir / "points" / "gt_t00000.ply")
    _, _, _, valid = pipeline.read_estimate(cfg.output_dir / "gt", cfg)
    assert len(pts) == int(valid[FrameId(0, 0)].sum() + valid[FrameId(1, 0)].sum())


# ------------------------------------------------------------------ CLI


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[scene]\nfps = -1\n")
    assert main(["generate", "--config", str(bad), "--output", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "scene.fps" in capsys.readouterr().err
    assert main(["track", "--output", str(tmp_path / "missing")]) == EXIT_IO

    ini = tmp_path / "ok.ini"
    ini.write_text("[scene]\nduration = 9\n[rig]\nwidth = 32\nheight = 24\n[refine]\nlr_phase2 = 50\niters_phase1 = 0\n")
    out = tmp_path / "run"
    assert main(["generate", "--config", str(ini), "--output", str(out), "--seed", "4"]) == EXIT_OK
    assert "seed = 4" in (out / "config.ini").read_text()
    assert main(["track", "--output", str(out)]) == EXIT_OK
    assert main(["refine", "--output", str(out)]) == EXIT_RUNTIME
    assert "phase2-pose-0" in capsys.readouterr().err
    assert main(["eval", "--output", str(out), "--stage", "track"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert "ate_m" in rep

    depth = out / "track" / "depth" / "c0_t00002.mcrd"
    depth.write_bytes(depth.read_bytes()[:50])
    assert main(["eval", "--output", str(out), "--stage", "track"]) == EXIT_IO
    err = capsys.readouterr().err
    assert "c0_t00002.mcrd" in err and "expected 3182 bytes" in err


def test_cli_preset_flag(tmp_path, capsys):
    out = tmp_path / "p"
    assert main(["generate", "--preset", "three-camera", "--output", str(out)] + []) == EXIT_OK
    assert (out / "gt" / "trajectory_c2.txt").exists()
