"""Trajectory, depth and scene-consistency metrics.

Multi-camera trajectories are concatenated camera by camera (then by time)
and aligned to ground truth with one similarity transform. Streams are
assumed index-synchronised: pose k of the estimate matches pose k of the
reference.
"""

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateConfiguration, DegenerateFit, NoValidPoints, TooShort
from .frames import FrameId
from .geometry import PoseSE3, Sim3, pixel_grid

COLLINEAR_TOL = 1e-10


class _View(NamedTuple):
    pose: PoseSE3
    depth: np.ndarray


@dataclass(frozen=True)
class Trajectory:
    """Per-camera lists of ``(timestamp, PoseSE3)``; timestamps strictly increase."""

    streams: tuple

    def __post_init__(self):
        streams = tuple(tuple((float(ts), pose) for ts, pose in s) for s in self.streams)
        for c, s in enumerate(streams):
            stamps = [ts for ts, _ in s]
            if any(b <= a for a, b in zip(stamps, stamps[1:])):
                raise ValueError(f"camera {c}: timestamps must be strictly increasing")
        object.__setattr__(self, "streams", streams)

    @classmethod
    def from_poses(cls, poses, fps=1.0):
        """Build from a ``{FrameId: PoseSE3}`` mapping; time index / fps gives seconds."""
        by_cam = {}
        for f, pose in poses.items():
            f = FrameId(*f)
            by_cam.setdefault(f.camera, []).append((f.time / fps, pose))
        return cls(tuple(sorted(by_cam[c], key=lambda x: x[0]) for c in sorted(by_cam)))

    def poses(self):
        return [p for s in self.streams for _, p in s]

    def positions(self):
        return np.array([p.translation for p in self.poses()]).reshape(-1, 3)

    def __len__(self):
        return sum(len(s) for s in self.streams)


def _positions(x):
    if isinstance(x, Trajectory):
        return x.positions()
    return np.asarray(x, dtype=float).reshape(-1, 3)


def umeyama_sim3(est, gt):
    """Similarity ``S`` minimising ``sum |S(p_est) - p_gt|^2`` in closed form."""
    X, Y = _positions(est), _positions(gt)
    if len(X) != len(Y):
        raise ValueError(f"length mismatch: {len(X)} estimated vs {len(Y)} reference poses")
    if len(X) < 3:
        raise DegenerateConfiguration("need at least 3 poses to align")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    spread = np.linalg.svd(Xc, compute_uv=False)
    if spread[0] <= 0 or spread[1] <= COLLINEAR_TOL * spread[0]:
        raise DegenerateConfiguration("estimated positions are coincident or collinear")
    cov = Yc.T @ Xc / len(X)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var = np.sum(Xc * Xc) / len(X)
    s = float(np.sum(D * np.diag(S)) / var)
    t = my - s * R @ mx
    return Sim3(s, R, t)


def _aligned_errors(est, gt, alignment=None):
    X, Y = _positions(est), _positions(gt)
    S = umeyama_sim3(X, Y) if alignment is None else alignment
    return np.linalg.norm(S.apply(X) - Y, axis=1), S


def ate(est, gt, alignment=None):
    """RMS translation error after similarity alignment."""
    err, _ = _aligned_errors(est, gt, alignment)
    return float(np.sqrt(np.mean(err * err)))


def _streams(x):
    if isinstance(x, Trajectory):
        return [[p for _, p in s] for s in x.streams]
    return [list(s) for s in x]


def _angle_deg(R):
    # atan2 keeps precision near zero, where acos of the trace does not
    c = (np.trace(R) - 1.0) / 2.0
    sn = 0.5 * math.sqrt((R[2, 1] - R[1, 2]) ** 2 + (R[0, 2] - R[2, 0]) ** 2 + (R[1, 0] - R[0, 1]) ** 2)
    return math.degrees(math.atan2(sn, c))


def rpe_terms(est, gt, delta=1):
    """Per-pair relative translation norms and rotation angles (degrees)."""
    E, G = _streams(est), _streams(gt)
    if len(E) != len(G):
        raise ValueError("estimate and reference have different camera counts")
    trans, rot = [], []
    for c, (es, gs) in enumerate(zip(E, G)):
        if len(es) != len(gs):
            raise ValueError(f"camera {c}: stream lengths differ")
        if len(es) < delta + 1:
            raise TooShort(f"camera {c}: {len(es)} frames, need at least {delta + 1}")
        for t in range(len(es) - delta):
            rel_g = gs[t].inverse() @ gs[t + delta]
            rel_e = es[t].inverse() @ es[t + delta]
            err = rel_g.inverse() @ rel_e
            trans.append(float(np.linalg.norm(err.translation)))
            rot.append(_angle_deg(err.rotation))
    return np.array(trans), np.array(rot)


def rpe(est, gt, delta=1):
    """``(RTE, RRE)``: RMS relative translation and rotation error; pairs stay within a camera."""
    trans, rot = rpe_terms(est, gt, delta)
    return float(np.sqrt(np.mean(trans**2))), float(np.sqrt(np.mean(rot**2)))


def _fit_scale_shift(est, ref):
    x, y = est.ravel(), ref.ravel()
    mx, my = x.mean(), y.mean()
    var = np.mean((x - mx) ** 2)
    if var < 1e-12:
        raise DegenerateFit("estimated depth has (near) zero variance")
    s = np.mean((x - mx) * (y - my)) / var
    return s, my - s * mx


def depth_metrics(D_est, D_gt, valid, align=True):
    """``(abs_rel, delta_125)`` after a per-frame least-squares scale and shift.

    ``align=False`` is a diagnostic mode that scores the raw estimate.
    """
    D_est, D_gt = np.asarray(D_est, dtype=float), np.asarray(D_gt, dtype=float)
    m = np.asarray(valid, dtype=bool) & np.isfinite(D_est) & np.isfinite(D_gt) & (D_gt > 0)
    if np.count_nonzero(m) < 2:
        raise DegenerateFit("need at least 2 valid pixels")
    x, y = D_est[m], D_gt[m]
    if align:
        s, o = _fit_scale_shift(x, y)
        x = s * x + o
    abs_rel = float(np.mean(np.abs(x - y) / y))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(x / y, y / x)
    delta = float(np.mean((x > 0) & (ratio < 1.25)))
    return abs_rel, delta


def _world_points(pose, depth, K):
    grid = pixel_grid(K.height, K.width)
    p = K.rays(grid) * depth[..., None]
    return pose.apply(p)


def scene_consistency_md(states, gt, alignment):
    """Median distance between aligned estimated and true world points.

    ``states`` maps frames to objects with ``pose`` and ``depth``. Estimated
    depths are multiplied by the trajectory scale before unprojection, so a
    pose aligned by ``alignment`` and its scaled depth land in GT units.
    """
    dists = []
    for f in sorted(states):
        st = states[f]
        f = FrameId(*f)
        K = gt.intrinsics(f.camera)
        D_gt, valid = gt.depth_of(f), gt.valid_of(f)
        D = np.asarray(st.depth, dtype=float)
        ok = valid & np.isfinite(D) & (D > 0)
        if not ok.any():
            continue
        aligned = PoseSE3(alignment.rotation @ st.pose.rotation, alignment.apply(st.pose.translation))
        pe = _world_points(aligned, np.where(ok, alignment.scale * D, 1.0), K)
        pg = _world_points(gt.pose(f), np.where(ok, D_gt, 1.0), K)
        dists.append(np.linalg.norm(pe - pg, axis=-1)[ok])
    if not dists:
        raise NoValidPoints("no valid pixels in any frame")
    return float(np.median(np.concatenate(dists)))


@dataclass
class MetricsReport:
    ate_m: float
    rte_m: float
    rre_deg: float
    abs_rel: float
    delta_125: float
    md_m: float
    alignment: Sim3
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in ("ate_m", "rte_m", "rre_deg", "abs_rel", "md_m"):
            if not getattr(self, k) >= 0:
                raise ValueError(f"{k} must be non-negative")
        if not 0.0 <= self.delta_125 <= 1.0:
            raise ValueError("delta_125 must lie in [0, 1]")

    def to_dict(self):
        a = self.alignment
        qx, qy, qz, qw = Rotation.from_matrix(a.rotation).as_quat()
        out = {k: float(getattr(self, k)) for k in ("ate_m", "rte_m", "rre_deg", "abs_rel", "delta_125", "md_m")}
        out["alignment"] = {
            "scale": float(a.scale),
            "quat": [float(qx), float(qy), float(qz), float(qw)],
            "trans": [float(v) for v in a.translation],
        }
        out.update(self.extras)
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def per_camera(est_poses, est_depths, gt, alignment, frames=None, delta=1):
    """Metrics restricted to each camera, all under one shared ``alignment``.

    Re-aligning a single camera would hide inter-camera drift and fails on
    straight-line paths, so the global similarity is reused.
    """
    frames = sorted(est_poses if frames is None else frames)
    out = {}
    for cam in sorted({FrameId(*f).camera for f in frames}):
        fs = [f for f in frames if FrameId(*f).camera == cam]
        est = [est_poses[f].translation for f in fs]
        ref = [gt.pose(f).translation for f in fs]
        err, _ = _aligned_errors(est, ref, alignment)
        row = {"ate_m": float(np.sqrt(np.mean(err**2))), "n_frames": len(fs)}
        if len(fs) > delta:
            row["rte_m"], row["rre_deg"] = rpe([[est_poses[f] for f in fs]], [[gt.pose(f) for f in fs]], delta)
        metrics = [depth_metrics(est_depths[f], gt.depth_of(f), gt.valid_of(f)) for f in fs]
        row["abs_rel"] = float(np.mean([m[0] for m in metrics]))
        row["delta_125"] = float(np.mean([m[1] for m in metrics]))
        row["md_m"] = scene_consistency_md({f: _View(est_poses[f], est_depths[f]) for f in fs}, gt, alignment)
        out[str(cam)] = row
    return out


def evaluate(est_poses, est_depths, gt, frames=None, delta=1):
    """Full report for ``{FrameId: pose}`` / ``{FrameId: depth}`` against a ground truth."""
    frames = sorted(est_poses if frames is None else frames)
    est = Trajectory.from_poses({f: est_poses[f] for f in frames})
    ref = Trajectory.from_poses({f: gt.pose(f) for f in frames})
    err, S = _aligned_errors(est, ref)
    rte, rre = rpe(est, ref, delta)
    rels, deltas = [], []
    for f in frames:
        a, d = depth_metrics(est_depths[f], gt.depth_of(f), gt.valid_of(f))
        rels.append(a)
        deltas.append(d)
    states = {f: _View(est_poses[f], est_depths[f]) for f in frames}
    md = scene_consistency_md(states, gt, S)
    extras = {"ate_mean_m": float(np.mean(err)), "ate_median_m": float(np.median(err)), "n_frames": len(frames)}
    return MetricsReport(float(np.sqrt(np.mean(err**2))), rte, rre, float(np.mean(rels)), float(np.mean(deltas)), md, S, extras)
