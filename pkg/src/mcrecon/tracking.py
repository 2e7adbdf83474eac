"""Stage one: multi-camera tracking over the spatio-temporal graph.

Bundle adjustment minimises

    sum_edges sum_px w * |u_reproj - u_flow|^2  +  lambda * sum_px (d - 1/D^s)^2

over the poses and disparities of the free frames with Levenberg-damped
Gauss-Newton. Disparities are eliminated per source frame (each pixel's
disparity is a scalar, so its block is diagonal) and the reduced pose system
is solved densely.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import kernels
from .errors import DegenerateFit, MissingFlow, ProviderFailure, SingularSystem
from .frames import FrameId, FrameState
from .geometry import Z_MIN, PoseSE3, pixel_grid, relative_pose, reproject, se3_compose, se3_exp, se3_inverse
from .graph import (
    GraphState,
    add_temporal_edges,
    balance_connections,
    detect_spatial_edges,
    detect_st_edges,
    edge_stats,
    retire_frames,
)

log = logging.getLogger(__name__)

MAX_DAMPING_RETRIES = 10
STEP_FLOOR = 1e-13
DISP_SHRINK = 0.25


@dataclass(frozen=True)
class TrackerConfig:
    lambda_depth: float = 0.005
    window_capacity: int = 25
    optimized_tail: int = 10
    n_init: int = 8
    temporal_radius: int = 2
    overlap_threshold: float = 0.75
    max_edges: int = 96
    st_per_camera_cap: int = 2
    gn_iterations: int = 8
    init_gn_iterations: int = 20
    gn_damping: float = 1e-4
    convergence_tol: float = 1e-8
    use_spatial: bool = True
    use_st: bool = True
    wide_baseline_init: bool = True

    def __post_init__(self):
        if self.lambda_depth < 0:
            raise ValueError("lambda_depth must be >= 0")
        if self.optimized_tail > self.window_capacity:
            raise ValueError("optimized_tail cannot exceed window_capacity")
        if self.n_init < 2:
            raise ValueError("n_init must be at least 2")
        if self.gn_iterations < 1 or self.init_gn_iterations < 1:
            raise ValueError("iteration caps must be positive")


@dataclass(frozen=True)
class AffineAlignment:
    s: float
    o: float

    def apply(self, depth):
        return self.s * depth + self.o


def align_affine(mono, reference, mask=None):
    """Least-squares ``s, o`` minimising ``sum (s * mono + o - reference)^2``."""
    mono = np.asarray(mono, dtype=float).ravel()
    reference = np.asarray(reference, dtype=float).ravel()
    keep = np.isfinite(mono) & np.isfinite(reference)
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool).ravel()
    x, y = mono[keep], reference[keep]
    n = x.size
    if n < 2:
        raise DegenerateFit(f"need at least 2 valid samples, got {n}")
    mx, my = x.mean(), y.mean()
    var = np.mean((x - mx) ** 2)
    if var < 1e-12:
        raise DegenerateFit("monocular samples have (near) zero variance")
    # 2x2 normal equations, centred for conditioning
    s = float(np.mean((x - mx) * (y - my)) / var)
    o = float(my - s * mx)
    if not s > 0:
        raise DegenerateFit(f"non-positive scale {s:.3g}")
    return AffineAlignment(s, o)


def predict_constant_velocity(T_prev, T_prev2):
    """Extrapolate one step: ``(T_prev o T_prev2^-1) o T_prev``."""
    delta = se3_compose(T_prev, se3_inverse(T_prev2))
    return se3_compose(delta, T_prev)


# ------------------------------------------------------------------ solver


@dataclass
class BAResult:
    initial_cost: float
    final_cost: float
    iterations: int
    accepted: int
    free: list
    costs: list = field(default_factory=list)


class _Problem:
    """Edge data and variable layout for one BA call."""

    def __init__(self, edges, states, flows, lam, free):
        self.states = states
        self.lam = lam
        self.free = sorted(free)
        self.index = {f: k for k, f in enumerate(self.free)}
        self.edges = []
        self._rays = {}
        for e in edges:
            obs = flows.get(e.key)
            if obs is None:
                raise MissingFlow(f"no flow for edge {e.src}->{e.dst}")
            s = states[e.src]
            K = s.intrinsics
            grid = pixel_grid(K.height, K.width)
            w = np.where(obs.mask & s.valid, obs.weight, 0.0).ravel()
            target = (grid + obs.flow).reshape(-1, 2)
            self.edges.append((e.src, e.dst, np.ascontiguousarray(w), np.ascontiguousarray(target)))
        self.prior = {}
        for f in self.free:
            s = states[f]
            ok = s.valid & np.isfinite(s.prior_depth) & (s.prior_depth > Z_MIN)
            target = np.where(ok, 1.0 / np.where(ok, s.prior_depth, 1.0), 0.0).ravel()
            self.prior[f] = (ok.ravel().astype(float), target)

    def rays(self, f):
        K = self.states[f].intrinsics
        key = (K.fx, K.fy, K.cx, K.cy, K.width, K.height)
        if key not in self._rays:
            self._rays[key] = np.ascontiguousarray(K.rays(pixel_grid(K.height, K.width)).reshape(-1, 3))
        return self._rays[key]

    def cost(self, poses, disps):
        total = 0.0
        for src, dst, w, target in self.edges:
            T = relative_pose(poses[src], poses[dst])
            total += kernels.ba_edge_cost(disps[src], self.rays(src), w, target, T.rotation, T.translation, self.states[dst].intrinsics, Z_MIN)
        for f in self.free:
            ok, target = self.prior[f]
            total += self.lam * float(np.sum(ok * (disps[f] - target) ** 2))
        return total

    def linearize(self, poses, disps):
        n = len(self.free)
        Hpp = np.zeros((6 * n, 6 * n))
        gp = np.zeros(6 * n)
        hdd = {f: np.zeros(disps[f].size) for f in self.free}
        gd = {f: np.zeros(disps[f].size) for f in self.free}
        coupling = {f: {} for f in self.free}
        cost = 0.0
        for src, dst, w, target in self.edges:
            T = relative_pose(poses[src], poses[dst])
            c, H, g, h, gdd, C = kernels.ba_edge(disps[src], self.rays(src), w, target, T.rotation, T.translation, self.states[dst].intrinsics, Z_MIN)
            cost += c
            ii, jj = self.index.get(src), self.index.get(dst)
            blocks = [(ii, slice(0, 6)), (jj, slice(6, 12))]
            for a, sa in blocks:
                if a is None:
                    continue
                gp[6 * a : 6 * a + 6] += g[sa]
                for b, sb in blocks:
                    if b is not None:
                        Hpp[6 * a : 6 * a + 6, 6 * b : 6 * b + 6] += H[sa, sb]
            if ii is not None:
                hdd[src] += h
                gd[src] += gdd
                for a, sa in blocks:
                    if a is not None:
                        acc = coupling[src].get(a)
                        coupling[src][a] = C[:, sa].copy() if acc is None else acc + C[:, sa]
        for f in self.free:
            ok, target = self.prior[f]
            r = disps[f] - target
            cost += self.lam * float(np.sum(ok * r * r))
            hdd[f] += self.lam * ok
            gd[f] += self.lam * ok * r
        return cost, Hpp, gp, hdd, gd, coupling

    def solve(self, lin, mu, poses_only=False):
        _, Hpp, gp, hdd, gd, coupling = lin
        S = Hpp + mu * np.diag(np.diag(Hpp)) + 1e-12 * np.eye(Hpp.shape[0])
        gS = gp.copy()
        elim = {}
        for f in () if poses_only else self.free:
            h = hdd[f] * (1.0 + mu)
            hinv = np.where(h > 0, 1.0 / np.where(h > 0, h, 1.0), 0.0)
            keys = sorted(coupling[f])
            if keys:
                B = np.concatenate([coupling[f][k] for k in keys], axis=1)
                Bh = B * hinv[:, None]
                blk = Bh.T @ B
                rhs = Bh.T @ gd[f]
                idx = np.concatenate([np.arange(6 * k, 6 * k + 6) for k in keys])
                S[np.ix_(idx, idx)] -= blk
                gS[idx] -= rhs
                elim[f] = (hinv, B, idx)
            else:
                elim[f] = (hinv, None, None)
        try:
            cho = linalg.cho_factor(S, check_finite=True)
            dp = linalg.cho_solve(cho, -gS)
        except (linalg.LinAlgError, ValueError) as exc:
            raise SingularSystem(f"reduced pose system not positive definite: {exc}") from exc
        dd = {f: np.zeros(hdd[f].size) for f in self.free}
        for f, (hinv, B, idx) in elim.items():
            rhs = gd[f] if B is None else gd[f] + B @ dp[idx]
            dd[f] = -hinv * rhs
        return dp, dd


def ba_objective(edges, states, flows, lam, free):
    """Eq.-4-style objective by plain per-pixel reprojection, independent of the solver."""
    total = 0.0
    for e in edges:
        s, d = states[e.src], states[e.dst]
        obs = flows[e.key]
        K = s.intrinsics
        grid = pixel_grid(K.height, K.width)
        w = np.where(obs.mask & s.valid, obs.weight, 0.0)
        use = w > 0
        r = reproject(grid, np.where(use, s.disparity, 1.0), K, d.intrinsics, relative_pose(s.pose, d.pose), mask=use)
        front = use & (r.depth > Z_MIN)
        res = r.pixels - (grid + obs.flow)
        total += float(np.sum(np.where(front, w * np.sum(res * res, axis=-1), 0.0)))
    for f in free:
        s = states[f]
        ok = s.valid & np.isfinite(s.prior_depth) & (s.prior_depth > Z_MIN)
        diff = np.where(ok, s.disparity - 1.0 / np.where(ok, s.prior_depth, 1.0), 0.0)
        total += lam * float(np.sum(diff * diff))
    return total


def _anchor_components(edges, states, free):
    """Freeze the earliest frame of any connected component that has no fixed frame."""
    parent = {}

    def find(x):
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for e in edges:
        parent[find(e.src)] = find(e.dst)
    groups = {}
    for f in set(parent):
        groups.setdefault(find(f), []).append(f)
    free = set(free)
    for members in groups.values():
        if all(m in free for m in members):
            free.discard(min(members, key=lambda f: (f.time, f.camera)))
    return free


def select_ba_problem(graph, states, config, free=None):
    """Free frames (latest ``optimized_tail`` per camera, not frozen) and the edges touching them."""
    if free is None:
        free = set()
        for cam in graph.active:
            tail = sorted(cam, key=lambda f: f.time)[-config.optimized_tail :]
            free.update(f for f in tail if not states[f].frozen)
    free = {f for f in free if not states[f].frozen}
    edges = [e for e in graph.sorted_edges() if e.src in free or e.dst in free]
    touched = {f for e in edges for f in (e.src, e.dst)}
    free &= touched
    free = _anchor_components(edges, states, free)
    edges = [e for e in edges if e.src in free or e.dst in free]
    return sorted(free), edges


def depth_regularized_ba(graph, states, flows, config, free=None, iterations=None, poses_only=False):
    """Damped Gauss-Newton over free poses and disparities; updates ``states`` in place.

    ``poses_only`` holds every disparity fixed and solves the pose block alone.
    """
    free, edges = select_ba_problem(graph, states, config, free)
    iterations = config.gn_iterations if iterations is None else iterations
    if not free:
        return BAResult(0.0, 0.0, 0, 0, [], [0.0])
    prob = _Problem(edges, states, flows, config.lambda_depth, free)
    poses = {f: s.pose for f, s in states.items()}
    disps = {f: np.ascontiguousarray(s.disparity, dtype=float).ravel() for f, s in states.items()}
    lin = prob.linearize(poses, disps)
    cost = initial = lin[0]
    costs = [cost]
    mu = config.gn_damping
    accepted = it = 0
    for it in range(1, iterations + 1):
        if cost <= 0.0:
            break
        improved = False
        solved = False
        for _ in range(MAX_DAMPING_RETRIES):
            try:
                dp, dd = prob.solve(lin, mu, poses_only)
            except SingularSystem:
                mu *= 10.0
                continue
            solved = True
            trial_p = dict(poses)
            trial_d = dict(disps)
            for f in free:
                k = prob.index[f]
                trial_p[f] = poses[f] @ se3_exp(dp[6 * k : 6 * k + 6])
                # a pixel may lose at most 1 - DISP_SHRINK of its disparity per
                # step; damping alone cannot stop a weakly observed pixel from
                # crossing zero, and one such pixel would block every step
                trial_d[f] = np.maximum(disps[f] + dd[f], DISP_SHRINK * disps[f])
            ok = all(np.all(trial_d[f][states[f].valid.ravel()] > 0) for f in free)
            new = prob.cost(trial_p, trial_d) if ok else math.inf
            if new < cost:
                improved = True
                break
            step = max(np.abs(dp).max(initial=0.0), max(np.abs(dd[f]).max(initial=0.0) for f in free))
            if step < STEP_FLOOR:
                # at the rounding floor: no representable improvement left
                break
            mu *= 10.0
        if not solved:
            raise SingularSystem(f"no factorisable system after {MAX_DAMPING_RETRIES} damping increases")
        if not improved:
            break
        accepted += 1
        rel = (cost - new) / cost
        poses, disps, cost = trial_p, trial_d, new
        costs.append(cost)
        mu = max(mu / 10.0, 1e-12)
        if rel < config.convergence_tol:
            break
        lin = prob.linearize(poses, disps)
    for f in free:
        s = states[f]
        s.pose = poses[f]
        s.disparity = np.where(s.valid, disps[f].reshape(s.disparity.shape), 1.0)
    return BAResult(initial, cost, it, accepted, free, costs)


# ---------------------------------------------------------------- sessions


@dataclass
class TrackingSession:
    config: TrackerConfig
    n_cameras: int
    intrinsics: list
    graph: GraphState
    states: dict
    alignment: AffineAlignment
    flow_provider: object
    mono_provider: object
    flows: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    time: int = -1

    def poses(self):
        return {f: s.pose for f, s in self.states.items()}

    def fetch_flows(self):
        for key in self.graph.edges:
            if key not in self.flows:
                try:
                    self.flows[key] = self.flow_provider.flow(*key)
                except Exception as exc:  # provider bugs surface with context
                    raise ProviderFailure(f"flow {key[0]}->{key[1]}: {exc}") from exc


def _make_state(frame, pose, prior_depth, K):
    valid = np.isfinite(prior_depth) & (prior_depth > Z_MIN)
    disp = np.where(valid, 1.0 / np.where(valid, prior_depth, 1.0), 1.0)
    return FrameState(frame, pose, disp, np.where(valid, prior_depth, np.inf), valid, K)


def _mono(provider, f):
    try:
        return np.asarray(provider.depth(f), dtype=float)
    except Exception as exc:
        raise ProviderFailure(f"mono depth {f}: {exc}") from exc


def _connect(session, frames, time):
    cfg = session.config
    g = session.graph
    for f in frames:
        add_temporal_edges(g, f, cfg.temporal_radius, created_at=time)
    if cfg.use_spatial and session.n_cameras > 1:
        detect_spatial_edges(g, session.states, time, cfg.overlap_threshold, created_at=time)
    if cfg.use_st and session.n_cameras > 1:
        for f in frames:
            detect_st_edges(g, session.states, f, cfg.overlap_threshold, cfg.st_per_camera_cap, created_at=time)


def wide_baseline_init(n_cameras, intrinsics, prior, mono, flow, config):
    """Bootstrap the first ``n_init`` frames of every camera.

    Poses and reference depths come from ``prior``; monocular depths are
    mapped onto the prior's scale by one pooled affine fit; one BA pass over
    all init frames follows with camera 0 frame 0 fixed.
    """
    frames = [FrameId(c, t) for c in range(n_cameras) for t in range(config.n_init)]
    monos = {f: _mono(mono, f) for f in frames}
    if config.wide_baseline_init:
        try:
            poses, ref = prior.prior(frames)
        except Exception as exc:
            raise ProviderFailure(f"init prior: {exc}") from exc
        alignment = align_affine(
            np.concatenate([monos[f].ravel() for f in frames]),
            np.concatenate([np.asarray(ref[f], dtype=float).ravel() for f in frames]),
        )
    else:
        poses = {f: PoseSE3.identity() for f in frames}
        alignment = AffineAlignment(1.0, 0.0)

    graph = GraphState(n_cameras, config.window_capacity, config.max_edges)
    states = {}
    for f in frames:
        states[f] = _make_state(f, poses[f], alignment.apply(monos[f]), intrinsics[f.camera])
        graph.add_frame(f)
    states[FrameId(0, 0)].frozen = True
    session = TrackingSession(config, n_cameras, list(intrinsics), graph, states, alignment, flow, mono)

    # the init graph is built without a budget so that the BA pass sees every pair
    full = GraphState(n_cameras, config.window_capacity, None)
    for f in frames:
        full.add_frame(f)
    saved = session.graph
    session.graph = full
    for t in range(config.n_init):
        _connect(session, [FrameId(c, t) for c in range(n_cameras)], t)
    session.fetch_flows()
    # poses first, with depths held at the prior, so that large initial pose
    # errors are not absorbed into the barely regularised disparities
    warm = depth_regularized_ba(full, states, session.flows, config, free=set(frames), iterations=config.init_gn_iterations, poses_only=True)
    result = depth_regularized_ba(full, states, session.flows, config, free=set(frames), iterations=config.init_gn_iterations)
    result.initial_cost = warm.initial_cost
    saved.edges = {}
    for e in full.sorted_edges():
        saved.insert(e.src, e.dst, e.created_at)
    saved.history.update(full.history)
    if saved.max_edges is not None:
        balance_connections(saved, saved.max_edges)
    session.graph = saved
    session.time = config.n_init - 1
    session.records.append(_record(session, "init", result))
    return session


def _record(session, label, result):
    stats = edge_stats(session.graph)
    return {
        "step": label,
        "time": session.time,
        "cost_before": result.initial_cost,
        "cost_after": result.final_cost,
        "iterations": result.iterations,
        "accepted": result.accepted,
        "free_frames": len(result.free),
        "edges": stats["total"],
        "edge_counts": stats["counts"],
        "inter_fraction": stats["inter_fraction"],
    }


def track_step(session, time=None):
    """Add every camera's frame at ``time`` and run one windowed BA."""
    cfg = session.config
    t = session.time + 1 if time is None else int(time)
    new = []
    for c in range(session.n_cameras):
        f = FrameId(c, t)
        prev, prev2 = session.states[FrameId(c, t - 1)].pose, session.states[FrameId(c, t - 2)].pose
        pose = predict_constant_velocity(prev, prev2)
        prior_depth = session.alignment.apply(_mono(session.mono_provider, f))
        session.states[f] = _make_state(f, pose, prior_depth, session.intrinsics[c])
        session.graph.add_frame(f)
        new.append(f)
    session.time = t
    _connect(session, new, t)
    session.fetch_flows()
    result = depth_regularized_ba(session.graph, session.states, session.flows, cfg)
    for c in range(session.n_cameras):
        for f in retire_frames(session.graph, c, cfg.window_capacity):
            session.states[f].frozen = True
    session.records.append(_record(session, "track", result))
    return result


def run_tracking(n_cameras, intrinsics, duration, prior, mono, flow, config):
    session = wide_baseline_init(n_cameras, intrinsics, prior, mono, flow, config)
    for t in range(config.n_init, duration):
        track_step(session, t)
    return session


__all__ = [
    "TrackerConfig",
    "AffineAlignment",
    "BAResult",
    "TrackingSession",
    "align_affine",
    "predict_constant_velocity",
    "depth_regularized_ba",
    "ba_objective",
    "select_ba_problem",
    "wide_baseline_init",
    "track_step",
    "run_tracking",
]
