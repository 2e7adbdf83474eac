"""Deterministic synthetic multi-camera scenes and oracle providers.

The scene is an analytic heightfield (sum of plane waves) plus one
axis-aligned box that translates over time. Depth maps are ray cast; the
providers hand out ground truth with controllable corruption in place of
learned flow, monocular depth and feed-forward initialisation models.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation

from . import kernels
from ._accel import worker_count
from .errors import EmptyView
from .frames import FlowObservation, FrameId
from .geometry import Z_MIN, Intrinsics, PoseSE3, pixel_grid

log = logging.getLogger(__name__)

HIT_NONE, HIT_TERRAIN, HIT_BOX = 0, 1, 2
OCCLUSION_TOL = 1e-4

_TAG_TERRAIN, _TAG_FLOW, _TAG_DRIFT, _TAG_MONO, _TAG_INIT = 11, 12, 13, 14, 15


def _rng(*keys):
    return np.random.default_rng([int(k) for k in keys])


@dataclass(frozen=True)
class TerrainSpec:
    amplitude: float = 0.1
    frequency: float = 4.0
    seed: int = 0
    n_waves: int = 4

    def waves(self, seed=0):
        """Wave table ``(kx, ky, amplitude, phase)`` with peak height <= amplitude."""
        if self.amplitude == 0 or self.n_waves == 0:
            return np.zeros((0, 4))
        rng = _rng(_TAG_TERRAIN, self.seed, seed)
        angles = rng.uniform(0.0, 2 * math.pi, self.n_waves)
        freqs = self.frequency * rng.uniform(0.6, 1.4, self.n_waves)
        weights = rng.uniform(0.5, 1.0, self.n_waves)
        weights = weights / weights.sum()
        phases = rng.uniform(0.0, 2 * math.pi, self.n_waves)
        return np.column_stack(
            [freqs * np.cos(angles), freqs * np.sin(angles), self.amplitude * weights, phases]
        )


@dataclass(frozen=True)
class BoxSpec:
    """Axis-aligned box whose centre follows ``base + amplitude * sin(2 pi t / period + phase)``."""

    size: tuple = (0.25, 0.25, 0.25)
    base: tuple = (0.0, 0.3, 0.15)
    amplitude: tuple = (0.3, 0.0, 0.0)
    period: float = 40.0
    phase: float = 0.0

    def center(self, t):
        s = math.sin(2 * math.pi * t / self.period + self.phase)
        return np.asarray(self.base, dtype=float) + np.asarray(self.amplitude, dtype=float) * s

    def bounds(self, t):
        c = self.center(t)
        h = 0.5 * np.asarray(self.size, dtype=float)
        return c - h, c + h


@dataclass(frozen=True)
class SceneSpec:
    terrain: TerrainSpec = TerrainSpec()
    static_extent: float = 3.0
    dynamic_object: BoxSpec = None
    duration: int = 40
    fps: float = 30.0


@dataclass(frozen=True)
class CameraSpec:
    """One camera: intrinsics and a look-at trajectory through waypoints.

    Waypoints are spread evenly over the sequence and interpolated with a
    natural cubic spline (C2, hence C1 at the knots).
    """

    intrinsics: Intrinsics
    waypoints: tuple
    targets: tuple

    def trajectory(self, duration):
        pos = np.asarray(self.waypoints, dtype=float).reshape(-1, 3)
        tgt = np.asarray(self.targets, dtype=float).reshape(-1, 3)
        if len(tgt) == 1 and len(pos) > 1:
            tgt = np.repeat(tgt, len(pos), axis=0)
        if len(pos) == 1 and len(tgt) > 1:
            pos = np.repeat(pos, len(tgt), axis=0)
        if len(pos) != len(tgt):
            raise ValueError("waypoints and targets must have equal length")
        if len(pos) == 1:
            return lambda t: (pos[0], tgt[0])
        knots = np.linspace(0.0, max(duration - 1, 1), len(pos))
        sp = CubicSpline(knots, pos, bc_type="natural")
        st = CubicSpline(knots, tgt, bc_type="natural")
        return lambda t: (sp(t), st(t))

    def pose(self, t, duration):
        position, target = self.trajectory(duration)(t)
        return look_at(position, target)


@dataclass(frozen=True)
class CameraRigSpec:
    cameras: tuple
    overlap_mode: str = "overlapping"

    @property
    def n_cameras(self):
        return len(self.cameras)


@dataclass(frozen=True)
class NoiseSpec:
    mono_scale_drift: tuple = (1.0, 1.0)
    mono_pixel_noise: float = 0.0
    init_rot_noise: float = 0.0
    init_trans_noise: float = 0.0
    flow_noise: float = 0.0
    dynamic_weight: float = 0.1
    # per-camera multiplicative mono-depth scale corruption (missing entries = 1)
    mono_camera_scale: tuple = ()

    INIT_TRANS_PRESETS = (0.0, 0.02, 0.05, 0.10)
    INIT_ROT_PRESET = 3.0

    def __post_init__(self):
        for name in ("mono_pixel_noise", "init_rot_noise", "init_trans_noise", "flow_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.dynamic_weight <= 1.0:
            raise ValueError("dynamic_weight must lie in [0, 1]")
        lo, hi = self.mono_scale_drift
        if not 0 < lo <= hi:
            raise ValueError("mono_scale_drift must be an increasing positive range")

    def camera_scale(self, camera):
        if camera < len(self.mono_camera_scale):
            return float(self.mono_camera_scale[camera])
        return 1.0


def look_at(position, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world pose with +z toward ``target``, +x right and +y down."""
    position = np.asarray(position, dtype=float)
    forward = np.asarray(target, dtype=float) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return PoseSE3(np.column_stack([right, down, forward]), position)


@dataclass
class GroundTruth:
    scene: SceneSpec
    rig: CameraRigSpec
    seed: int
    waves: np.ndarray
    poses: list  # [camera][time] -> PoseSE3
    depth: list  # [camera] -> (T, H, W); inf where nothing is hit
    hit: list  # [camera] -> (T, H, W) int8 hit id
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_cameras(self):
        return self.rig.n_cameras

    @property
    def duration(self):
        return self.scene.duration

    def intrinsics(self, camera):
        return self.rig.cameras[camera].intrinsics

    def pose(self, f):
        return self.poses[f.camera][f.time]

    def depth_of(self, f):
        return self.depth[f.camera][f.time]

    def valid_of(self, f):
        return self.hit[f.camera][f.time] != HIT_NONE

    def dynamic_of(self, f):
        return self.hit[f.camera][f.time] == HIT_BOX

    def frames(self):
        return [FrameId(c, t) for c in range(self.n_cameras) for t in range(self.duration)]

    def cast(self, origin, dirs, t):
        """Nearest hit along world rays at time ``t``: ``(lam, hit_id)``."""
        return cast_rays(self.waves, self.scene, origin, dirs, t)


def cast_rays(waves, scene, origin, dirs, t):
    z_bound = float(np.abs(waves[:, 2]).sum()) + 1e-6 if len(waves) else 1e-6
    lam = kernels.raycast_heightfield(origin, dirs, waves, z_bound, step=1e-3, far=8.0 * scene.static_extent)
    hit = np.where(np.isfinite(lam), HIT_TERRAIN, HIT_NONE).astype(np.int8)
    if scene.dynamic_object is not None:
        lo, hi = scene.dynamic_object.bounds(t)
        lb = kernels.raycast_box(origin, dirs, lo, hi)
        box_first = lb < lam
        lam = np.where(box_first, lb, lam)
        hit = np.where(box_first, HIT_BOX, hit).astype(np.int8)
    return lam, hit


def render_depth(waves, scene, pose, K, t):
    """Camera-z depth map (H, W) and hit ids for one frame."""
    grid = pixel_grid(K.height, K.width)
    dirs = K.rays(grid).reshape(-1, 3) @ pose.rotation.T
    lam, hit = cast_rays(waves, scene, pose.translation, dirs, t)
    return lam.reshape(K.height, K.width), hit.reshape(K.height, K.width)


def generate_scene(scene, rig, seed=0):
    """Render ground-truth poses and depth for every camera and frame.

    Output is a pure function of ``(scene, rig, seed)``.
    """
    waves = scene.terrain.waves(seed)
    poses = [[cam.pose(float(t), scene.duration) for t in range(scene.duration)] for cam in rig.cameras]
    jobs = [(c, t) for c in range(rig.n_cameras) for t in range(scene.duration)]

    def work(job):
        c, t = job
        return render_depth(waves, scene, poses[c][t], rig.cameras[c].intrinsics, t)

    n = worker_count()
    if n > 1:
        with ThreadPoolExecutor(n) as ex:
            rendered = list(ex.map(work, jobs))
    else:
        rendered = [work(j) for j in jobs]

    depth, hit = [], []
    for c, cam in enumerate(rig.cameras):
        K = cam.intrinsics
        d = np.empty((scene.duration, K.height, K.width))
        h = np.empty((scene.duration, K.height, K.width), dtype=np.int8)
        for t in range(scene.duration):
            d[t], h[t] = rendered[c * scene.duration + t]
        if not (h != HIT_NONE).any():
            raise EmptyView(f"camera {c} sees no geometry in any frame")
        depth.append(d)
        hit.append(h)
    if scene.dynamic_object is not None:
        seen = np.mean([np.any(h == HIT_BOX, axis=(1, 2)).mean() for h in hit])
        if seen < 0.5:
            log.warning("dynamic object visible in only %.0f%% of frames", 100 * seen)
    return GroundTruth(scene, rig, seed, waves, poses, depth, hit)


# ------------------------------------------------------------------ providers


class FlowProvider(Protocol):
    def flow(self, src: FrameId, dst: FrameId) -> FlowObservation: ...


class MonoDepthProvider(Protocol):
    def depth(self, frame: FrameId) -> np.ndarray: ...


class InitPriorProvider(Protocol):
    def prior(self, frames: list) -> tuple: ...


def oracle_flow(gt, src, dst, noise, seed=None):
    """Ground-truth correspondence field from ``src`` to ``dst`` plus noise.

    Static pixels move with the cameras; box pixels additionally follow the
    box displacement between the two timestamps. Targets that leave the
    image, fall behind the camera or are occluded at ``dst`` are masked, as
    are pixels whose weight is zero.
    """
    seed = gt.seed if seed is None else seed
    Ki, Kj = gt.intrinsics(src.camera), gt.intrinsics(dst.camera)
    grid = pixel_grid(Ki.height, Ki.width)
    D = gt.depth_of(src)
    valid = gt.valid_of(src)
    dyn = gt.dynamic_of(src)
    weight = np.where(dyn, noise.dynamic_weight, 1.0)
    if src == dst:
        mask = valid & (weight > 0)
        return FlowObservation(np.zeros(grid.shape), np.where(mask, weight, 0.0), mask)

    Ti, Tj = gt.pose(src), gt.pose(dst)
    p = Ki.rays(grid) * np.where(valid, D, 1.0)[..., None]
    X = Ti.apply(p)
    box = gt.scene.dynamic_object
    if box is not None and src.time != dst.time:
        X = np.where(dyn[..., None], X + (box.center(dst.time) - box.center(src.time)), X)
    q = Tj.inverse().apply(X)
    z = q[..., 2]
    front = valid & (z > Z_MIN)
    u = Kj.project(np.where(front[..., None], q, np.array([0.0, 0.0, 1.0])))
    ok = front & Kj.in_bounds(u)

    idx = np.flatnonzero(ok.ravel())
    if idx.size:
        dirs = Kj.rays(u.reshape(-1, 2)[idx]) @ Tj.rotation.T
        lam, _ = gt.cast(Tj.translation, dirs, dst.time)
        visible = lam >= z.ravel()[idx] - OCCLUSION_TOL
        flat = ok.ravel().copy()
        flat[idx[~visible]] = False
        ok = flat.reshape(ok.shape)

    mask = ok & (weight > 0)
    flow = np.where(mask[..., None], u - grid, 0.0)
    if noise.flow_noise > 0:
        rng = _rng(_TAG_FLOW, seed, src.camera, src.time, dst.camera, dst.time)
        flow = flow + np.where(mask[..., None], rng.normal(scale=noise.flow_noise, size=flow.shape), 0.0)
    return FlowObservation(flow, np.where(mask, weight, 0.0), mask)


class OracleFlow:
    """FlowProvider backed by :func:`oracle_flow`, memoised per edge."""

    def __init__(self, gt, noise, seed=None):
        self.gt = gt
        self.noise = noise
        self.seed = gt.seed if seed is None else seed
        self._memo = {}

    def flow(self, src, dst):
        key = (FrameId(*src), FrameId(*dst))
        if key not in self._memo:
            self._memo[key] = oracle_flow(self.gt, key[0], key[1], self.noise, self.seed)
        return self._memo[key]


def scale_drift_walk(duration, drift_range, camera, seed):
    """Smooth per-frame multiplicative drift, reflected into ``drift_range``."""
    lo, hi = (math.log(v) for v in drift_range)
    if hi == lo:
        return np.full(duration, math.exp(lo))
    rng = _rng(_TAG_DRIFT, seed, camera)
    step = (hi - lo) / 8.0
    x = np.empty(duration)
    x[0] = rng.uniform(lo, hi)
    for t in range(1, duration):
        v = x[t - 1] + rng.normal(scale=step)
        width = hi - lo
        v = (v - lo) % (2 * width)
        x[t] = lo + (v if v <= width else 2 * width - v)
    return np.exp(x)


def mono_depth(gt, frame, noise, seed=None):
    """Corrupted monocular depth ``drift_t * camera_scale * D_gt * (1 + eps)``."""
    seed = gt.seed if seed is None else seed
    drift = scale_drift_walk(gt.duration, noise.mono_scale_drift, frame.camera, seed)[frame.time]
    D = gt.depth_of(frame)
    out = drift * noise.camera_scale(frame.camera) * D
    if noise.mono_pixel_noise > 0:
        rng = _rng(_TAG_MONO, seed, frame.camera, frame.time)
        eps = rng.normal(scale=noise.mono_pixel_noise, size=D.shape)
        out = out * np.maximum(1.0 + eps, 0.05)
    return np.where(gt.valid_of(frame), out, np.inf)


class OracleMonoDepth:
    def __init__(self, gt, noise, seed=None):
        self.gt = gt
        self.noise = noise
        self.seed = gt.seed if seed is None else seed

    def depth(self, frame):
        return mono_depth(self.gt, FrameId(*frame), self.noise, self.seed)


def perturb_pose(pose, rot_deg, trans_norm, rng):
    """Rotate by exactly ``rot_deg`` about a random axis, shift by exactly ``trans_norm``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    dR = Rotation.from_rotvec(axis * math.radians(rot_deg)).as_matrix()
    return PoseSE3(pose.rotation @ dR, pose.translation + trans_norm * direction)


def init_prior(gt, frames, noise, seed=None):
    """Stand-in for the feed-forward initialiser: noisy poses, exact depth."""
    seed = gt.seed if seed is None else seed
    poses, depths = {}, {}
    for f in frames:
        f = FrameId(*f)
        rng = _rng(_TAG_INIT, seed, f.camera, f.time)
        poses[f] = perturb_pose(gt.pose(f), noise.init_rot_noise, noise.init_trans_noise, rng)
        depths[f] = gt.depth_of(f).copy()
    return poses, depths


class OracleInitPrior:
    def __init__(self, gt, noise, seed=None):
        self.gt = gt
        self.noise = noise
        self.seed = gt.seed if seed is None else seed

    def prior(self, frames):
        return init_prior(self.gt, frames, self.noise, self.seed)
