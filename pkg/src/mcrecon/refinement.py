"""Stage two: multi-view scene-consistency refinement.

Depths and poses from tracking are refined against dense flow on an
augmented graph. The objective is

    L_reproj = w_f * L_flow + w_d * L_disp

where both terms are confidence-weighted means over valid pixels. Phase 1
fits a per-frame scale and shift plus the confidences with poses fixed.
Phase 2 alternates pose passes (L_reproj + L_pose over per-frame twists)
and depth passes (L_reproj over per-pixel log-depth).

Gradients are analytic. All edges are packed into flat arrays so one
compiled kernel call evaluates the loss and its gradient per iteration.
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import Divergence, EmptyMask
from .frames import FrameId
from .geometry import Z_MIN, PoseSE3, pixel_grid, reproject

DIVERGENCE_FACTOR = 10.0


@dataclass(frozen=True)
class RefineConfig:
    w_f: float = 1.0
    w_d: float = 0.1
    lambda_conf: float = 0.05
    c_floor: float = 1e-3
    s_floor: float = 1e-3
    w_prior: float = 0.01
    w_tem_rot: float = 1e-4
    w_tem_trans: float = 1e-4
    lr_phase1: float = 1e-2
    lr_phase2: float = 5e-3
    lr_final_fraction: float = 0.05
    lr_warmup: int = 10
    iters_phase1: int = 300
    outer_loops: int = 3
    iters_pose: int = 50
    iters_depth: int = 100
    temporal_offsets: tuple = (2, 4, 8)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # a pass stops once its best loss has not improved by a relative
    # min_improvement for this many steps; 0 runs every step
    patience: int = 30
    min_improvement: float = 1e-6
    # losses are mean pixel residuals; the 10x divergence rule is measured
    # against at least this level so near-exact inputs do not trip it
    divergence_floor: float = 0.1

    def __post_init__(self):
        for name in ("w_f", "w_d", "lambda_conf", "w_prior", "w_tem_rot", "w_tem_trans", "lr_phase1", "lr_phase2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 < self.c_floor < 1:
            raise ValueError("c_floor must lie in (0, 1)")
        if not 0 < self.lr_final_fraction <= 1:
            raise ValueError("lr_final_fraction must lie in (0, 1]")
        if self.divergence_floor < 0 or self.min_improvement < 0:
            raise ValueError("divergence_floor and min_improvement must be >= 0")
        for name in ("iters_phase1", "outer_loops", "iters_pose", "iters_depth", "patience", "lr_warmup"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        offs = tuple(sorted({int(k) for k in self.temporal_offsets}))
        if any(k <= 0 for k in offs):
            raise ValueError("temporal offsets must be positive")
        object.__setattr__(self, "temporal_offsets", offs)


# ------------------------------------------------------------------- graph


@dataclass
class RefineGraph:
    edges: tuple
    flows: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.edges)


def build_refine_graph(tracking_edges, sequences, offsets=(2, 4, 8), flow_provider=None):
    """Tracking edges plus per-camera ``i -> i + k`` links for every offset ``k``.

    ``tracking_edges`` is a ``GraphState`` (its full history is used) or an
    iterable of edges / ``(src, dst)`` pairs. ``sequences`` gives the frame
    count per camera, as a list or a ``{camera: count}`` mapping.
    """
    if hasattr(tracking_edges, "history"):
        tracking_edges = tracking_edges.history.values()
    keys = set()
    for e in tracking_edges:
        src, dst = (e.src, e.dst) if hasattr(e, "src") else e
        keys.add((FrameId(*src), FrameId(*dst)))
    counts = dict(sequences) if isinstance(sequences, dict) else dict(enumerate(sequences))
    for cam, n in counts.items():
        for t in range(n):
            for k in offsets:
                if t + k < n:
                    keys.add((FrameId(cam, t), FrameId(cam, t + k)))
    graph = RefineGraph(tuple(sorted(keys)))
    if flow_provider is not None:
        graph.flows = {key: flow_provider.flow(*key) for key in graph.edges}
    return graph


# ------------------------------------------------------------------- state


@dataclass
class RefineState:
    """Per-frame affine depth, base depth, poses and twists; per-edge confidences.

    ``depth`` holds the base maps ``D_i``; the effective depth entering the
    geometry is ``s_i * D_i + beta_i``. ``poses`` are the current baked poses
    and ``delta`` the pending twists, so frame ``i`` sits at
    ``poses[i] @ exp(delta[i])``.
    """

    frames: list
    poses: list
    depth: np.ndarray
    valid: np.ndarray
    intrinsics: list
    s: np.ndarray = None
    beta: np.ndarray = None
    delta: np.ndarray = None
    log_conf: np.ndarray = None

    def __post_init__(self):
        self.frames = [FrameId(*f) for f in self.frames]
        F = len(self.frames)
        self.depth = np.asarray(self.depth, dtype=float).copy()
        self.valid = np.asarray(self.valid, dtype=bool) & np.isfinite(self.depth) & (self.depth > 0)
        self.depth = np.where(self.valid, self.depth, 1.0)
        self.s = np.ones(F) if self.s is None else np.asarray(self.s, dtype=float).copy()
        self.beta = np.zeros(F) if self.beta is None else np.asarray(self.beta, dtype=float).copy()
        self.delta = np.zeros((F, 6)) if self.delta is None else np.asarray(self.delta, dtype=float).copy()
        self.index = {f: k for k, f in enumerate(self.frames)}

    @classmethod
    def from_maps(cls, poses, depths, intrinsics, valid=None):
        frames = sorted(FrameId(*f) for f in poses)
        D = np.stack([np.asarray(depths[f], dtype=float) for f in frames])
        V = np.ones(D.shape, bool) if valid is None else np.stack([np.asarray(valid[f], bool) for f in frames])
        return cls(frames, [poses[f] for f in frames], D, V, list(intrinsics))

    def effective_depth(self):
        return self.s[:, None, None] * self.depth + self.beta[:, None, None]

    def current_poses(self):
        R, t = _batched_pose(self.poses, self.delta)
        return R, t

    def pose(self, f):
        R, t = _batched_pose([self.poses[self.index[f]]], self.delta[self.index[f]][None])
        return PoseSE3(R[0], t[0])

    def bake(self):
        """Fold pending twists into the poses and reset them to zero."""
        R, t = self.current_poses()
        self.poses = [PoseSE3(R[k], t[k]) for k in range(len(self.frames))]
        self.delta[:] = 0.0

    def conf(self):
        return np.exp(self.log_conf)


def _hat_batch(v):
    W = np.zeros(v.shape[:-1] + (3, 3))
    W[..., 0, 1], W[..., 0, 2] = -v[..., 2], v[..., 1]
    W[..., 1, 0], W[..., 1, 2] = v[..., 2], -v[..., 0]
    W[..., 2, 0], W[..., 2, 1] = -v[..., 1], v[..., 0]
    return W


def _exp_batch(delta):
    """SE(3) exponential for a stack of twists; returns ``(R, t)``."""
    w, rho = delta[:, :3], delta[:, 3:]
    th = np.linalg.norm(w, axis=1)
    W = _hat_batch(w)
    W2 = W @ W
    small = th < 1e-6
    ths = np.where(small, 1.0, th)
    A = np.where(small, 1.0 - th**2 / 6.0, np.sin(ths) / ths)
    B = np.where(small, 0.5 - th**2 / 24.0, (1.0 - np.cos(ths)) / ths**2)
    C = np.where(small, 1.0 / 6.0 - th**2 / 120.0, (ths - np.sin(ths)) / ths**3)
    I = np.eye(3)[None]
    R = I + A[:, None, None] * W + B[:, None, None] * W2
    V = I + B[:, None, None] * W + C[:, None, None] * W2
    return R, np.einsum("nij,nj->ni", V, rho)


def _batched_pose(poses, delta):
    R0 = np.stack([p.rotation for p in poses])
    t0 = np.stack([p.translation for p in poses])
    dR, dt = _exp_batch(np.asarray(delta, dtype=float))
    return R0 @ dR, t0 + np.einsum("nij,nj->ni", R0, dt)


def _right_jacobian_batch(delta, terms=24):
    ad = np.zeros((len(delta), 6, 6))
    Wo = _hat_batch(delta[:, :3])
    ad[:, :3, :3] = Wo
    ad[:, 3:, :3] = _hat_batch(delta[:, 3:])
    ad[:, 3:, 3:] = Wo
    ad = -ad
    J = np.broadcast_to(np.eye(6), ad.shape).copy()
    term = J.copy()
    for k in range(1, terms):
        term = term @ ad / (k + 1)
        J += term
    return J


# --------------------------------------------------------------- packing


class RefineProblem:
    """Graph and state packed into flat arrays for the refinement kernel."""

    def __init__(self, graph, state, config):
        self.graph = graph
        self.state = state
        self.config = config
        F, H, W = state.depth.shape
        self.shape = (H, W)
        P = H * W
        cams = sorted({f.camera for f in state.frames})
        Ks = []
        for c in range(max(cams) + 1):
            K = state.intrinsics[c]
            if (K.height, K.width) != (H, W):
                raise ValueError("all cameras must share one resolution")
            Ks.append(K)
        grid = pixel_grid(H, W)
        self.rays = np.ascontiguousarray(np.stack([K.rays(grid).reshape(P, 3) for K in Ks]))
        self.Kc = np.array([[K.fx, K.fy, K.cx, K.cy] for K in Ks])
        self.frame_cam = np.array([f.camera for f in state.frames], dtype=np.int64)
        E = len(graph.edges)
        if E == 0:
            raise EmptyMask("refinement graph has no edges")
        self.src = np.empty(E, dtype=np.int64)
        self.dst = np.empty(E, dtype=np.int64)
        self.tgt = np.empty((E, P, 2))
        self.tidx = np.empty((E, P), dtype=np.int64)
        self.emask = np.empty((E, P), dtype=bool)
        for e, key in enumerate(graph.edges):
            self.src[e] = state.index[key[0]]
            self.dst[e] = state.index[key[1]]
            obs = graph.flows[key]
            T = (grid + obs.flow).reshape(P, 2)
            self.tgt[e] = T
            self.emask[e] = (np.asarray(obs.mask, bool) & (np.asarray(obs.weight) > 0)).ravel()
            Kd = Ks[key[1].camera]
            # nearest pixel of the flow target; the scatter location never moves
            ix = np.floor(T[:, 0] + 0.5).astype(np.int64)
            iy = np.floor(T[:, 1] + 0.5).astype(np.int64)
            inside = (ix >= 0) & (ix < Kd.width) & (iy >= 0) & (iy < Kd.height) & np.isfinite(T).all(axis=1)
            self.tidx[e] = np.where(inside, iy * W + ix, -1)
        self.fvalid = np.ascontiguousarray(state.valid.reshape(F, P))
        if state.log_conf is None:
            state.log_conf = np.zeros((E, H, W))

    def edge_poses(self, R, t):
        Rs, Rd = R[self.src], R[self.dst]
        RdT = np.transpose(Rd, (0, 2, 1))
        Rij = RdT @ Rs
        tij = np.einsum("nij,nj->ni", RdT, t[self.src] - t[self.dst])
        return np.ascontiguousarray(Rij), np.ascontiguousarray(tij)

    def terms(self, R, t, zeff, log_conf, w_f, w_d, want_pose=True, want_conf=True):
        """Raw kernel call on explicit frame poses, effective depths and log-confidences."""
        F = zeff.shape[0]
        Rij, tij = self.edge_poses(R, t)
        E, P = self.tidx.shape
        return kernels.refine_terms(
            self.src, self.dst, Rij, tij, self.tidx, self.emask, self.tgt,
            np.ascontiguousarray(log_conf.reshape(E, P)), np.ascontiguousarray(zeff.reshape(F, P)),
            self.fvalid, self.frame_cam, self.rays, self.Kc, Z_MIN, self.config.lambda_conf,
            w_f, w_d, want_pose, want_conf,
        )

    def frame_pose_grad(self, g_src, g_dst):
        """Sum per-edge twist gradients onto frames, in edge order."""
        g = np.zeros((len(self.state.frames), 6))
        np.add.at(g, self.src, g_src)
        np.add.at(g, self.dst, g_dst)
        return g

    def reproj(self, want_pose=True, want_conf=True, zeff=None, delta=None, log_conf=None):
        """``L_reproj`` at the current (or supplied) variables, with gradients.

        Returns ``(loss, parts, grads)``; ``grads`` holds ``zeff`` (F, H, W),
        ``conf`` (E, H, W) and ``delta`` (F, 6) when requested, the latter
        already chained through the exponential map's right Jacobian.
        """
        st, cfg = self.state, self.config
        delta = st.delta if delta is None else delta
        log_conf = st.log_conf if log_conf is None else log_conf
        zeff = st.effective_depth() if zeff is None else zeff
        R, t = _batched_pose(st.poses, delta)
        stats, g_zeff, g_conf, g_src, g_dst, _ = self.terms(R, t, zeff, log_conf, cfg.w_f, cfg.w_d, want_pose, want_conf)
        Sf, Sd, Mf, Md = stats
        if Mf == 0:
            raise EmptyMask("no valid flow pixels in the refinement graph")
        if Md == 0 and cfg.w_d > 0:
            raise EmptyMask("no valid warped-depth pixels in the refinement graph")
        lf = Sf / Mf
        ld = Sd / Md if Md else 0.0
        loss = cfg.w_f * lf + cfg.w_d * ld
        grads = {"zeff": g_zeff.reshape(zeff.shape)}
        if want_conf:
            grads["conf"] = g_conf.reshape(log_conf.shape)
        if want_pose:
            g_local = self.frame_pose_grad(g_src, g_dst)
            grads["delta"] = np.einsum("nji,nj->ni", _right_jacobian_batch(delta), g_local)
        return loss, {"flow": lf, "disp": ld, "n_flow": int(Mf), "n_disp": int(Md)}, grads


    def gradients(self):
        """``L_reproj`` and its gradient wrt ``s``, ``beta``, ``c``, ``D`` and ``delta``.

        Invalid pixels get zero depth gradient.
        """
        st = self.state
        loss, _, g = self.reproj(want_pose=True, want_conf=True)
        gz = np.where(st.valid, g["zeff"], 0.0)
        return loss, {
            "s": np.sum(gz * st.depth, axis=(1, 2)),
            "beta": np.sum(gz, axis=(1, 2)),
            "conf": g["conf"],
            "depth": gz * st.s[:, None, None],
            "delta": g["delta"],
        }


# ---------------------------------------------------------- loss functions


def refine_reproject(u_i, D_i, s_i, beta_i, K_i, K_j, T_ij, mask=None):
    """Reproject pixels of frame ``i`` using the affine-corrected depth ``s_i * D_i + beta_i``.

    Pixels whose corrected depth is not positive are masked rather than fatal.
    """
    z = s_i * np.asarray(D_i, dtype=float) + beta_i
    ok = np.isfinite(z) & (z > 0)
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)
    disp = np.where(ok, 1.0 / np.where(ok, z, 1.0), 1.0)
    return reproject(u_i, disp, K_i, K_j, T_ij, mask=ok)


def warp_depth(D_i, flow, s_i, beta_i, K_i, K_j, T_ij, mask=None):
    """Scatter the depth-in-``j`` of each source pixel to its nearest flow-target pixel.

    The nearest-to-camera source wins a contested pixel. Returns
    ``(D_flow, filled, winner)``; unfilled pixels hold ``inf`` and winner -1.
    """
    H, W = np.shape(D_i)
    grid = pixel_grid(H, W)
    z = s_i * np.asarray(D_i, dtype=float) + beta_i
    ok = np.isfinite(z) & (z > 0)
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)
    # only the flow target has to be inside frame j, not the reprojection
    r = refine_reproject(grid, D_i, s_i, beta_i, K_i, K_j, T_ij, ok)
    ok &= r.depth > Z_MIN
    T = grid + np.asarray(flow, dtype=float)
    ix = np.floor(T[..., 0] + 0.5).astype(np.int64)
    iy = np.floor(T[..., 1] + 0.5).astype(np.int64)
    ok &= (ix >= 0) & (ix < K_j.width) & (iy >= 0) & (iy < K_j.height)
    target = np.where(ok, iy * K_j.width + ix, -1).ravel()
    buf, winner = kernels.zbuffer_scatter(target, np.where(ok, r.depth, np.inf).ravel(), K_j.width * K_j.height)
    shape = (K_j.height, K_j.width)
    return buf.reshape(shape), (winner >= 0).reshape(shape), winner.reshape(shape)


def loss_flow(graph, state, config):
    """Confidence-weighted mean L1 flow residual plus the confidence barrier."""
    prob = RefineProblem(graph, state, config)
    R, t = state.current_poses()
    stats = prob.terms(R, t, state.effective_depth(), state.log_conf, 1.0, 0.0, False, False)[0]
    if stats[2] == 0:
        raise EmptyMask("no valid flow pixels")
    return float(stats[0] / stats[2])


def loss_disp(graph, state, config):
    """Confidence-weighted mean of ``max/min - 1`` between warped and own depth."""
    prob = RefineProblem(graph, state, config)
    R, t = state.current_poses()
    stats = prob.terms(R, t, state.effective_depth(), state.log_conf, 0.0, 1.0, False, True)[0]
    if stats[3] == 0:
        raise EmptyMask("no valid warped-depth pixels")
    return float(stats[1] / stats[3])


def _camera_chains(frames):
    chains = {}
    for k, f in enumerate(frames):
        chains.setdefault(f.camera, []).append((f.time, k))
    return [[k for _, k in sorted(c)] for _, c in sorted(chains.items())]


def loss_pose(state, config, delta=None, with_grad=False):
    """Prior on the pending twists plus rotation/translation smoothness per camera."""
    delta = state.delta if delta is None else delta
    R, t = _batched_pose(state.poses, delta)
    loss = config.w_prior * float(np.sum(delta * delta))
    g_local = np.zeros_like(delta)
    for chain in _camera_chains(state.frames):
        a, b = np.array(chain[:-1], dtype=int), np.array(chain[1:], dtype=int)
        if a.size == 0:
            continue
        M = np.transpose(R[a], (0, 2, 1)) @ R[b]
        D = M - np.eye(3)
        loss += config.w_tem_rot * float(np.sum(D * D))
        dt = t[a] - t[b]
        loss += config.w_tem_trans * float(np.sum(dt * dt))
        if with_grad:
            # |M - I|_F^2 = 6 - 2 tr M; perturbing R_b on the right by eps
            # changes tr M by eps . (M12 - M21, M20 - M02, M01 - M10)
            v = np.stack([M[:, 1, 2] - M[:, 2, 1], M[:, 2, 0] - M[:, 0, 2], M[:, 0, 1] - M[:, 1, 0]], axis=1)
            gb = -2.0 * config.w_tem_rot * v
            np.add.at(g_local[:, :3], b, gb)
            np.add.at(g_local[:, :3], a, -gb)
            ga_t = 2.0 * config.w_tem_trans * np.einsum("nji,nj->ni", R[a], dt)
            gb_t = -2.0 * config.w_tem_trans * np.einsum("nji,nj->ni", R[b], dt)
            np.add.at(g_local[:, 3:], a, ga_t)
            np.add.at(g_local[:, 3:], b, gb_t)
    if not with_grad:
        return loss
    grad = np.einsum("nji,nj->ni", _right_jacobian_batch(delta), g_local) + 2.0 * config.w_prior * delta
    return loss, grad


# --------------------------------------------------------------- optimiser


class Adam:
    """Bias-corrected first/second-moment gradient steps on a flat array."""

    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.k = 0

    def step(self, grad, lr):
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1**self.k)
        vh = self.v / (1 - self.b2**self.k)
        return -lr * mh / (np.sqrt(vh) + self.eps)


class _Schedule:
    """Adam state plus a step counter for one block of variables.

    The learning rate warms up linearly over ``lr_warmup`` steps and then
    decays exponentially to ``lr_final_fraction`` of the base over ``total``
    steps. One schedule spans every pass over its block, so moments and
    decay carry over from one outer loop to the next.
    """

    def __init__(self, n, base, total, config):
        self.adam = Adam(n, config.adam_beta1, config.adam_beta2, config.adam_eps)
        self.base = base
        self.total = max(total, 1)
        self.warmup = config.lr_warmup
        self.final = config.lr_final_fraction
        self.k = 0

    def lr(self):
        warm = min(1.0, (self.k + 1) / self.warmup) if self.warmup > 0 else 1.0
        return self.base * warm * self.final ** (min(self.k, self.total - 1) / max(self.total - 1, 1))

    def step(self, grad):
        lr = self.lr()
        self.k += 1
        return self.adam.step(grad, lr)


class _Tracker:
    """Best-iterate bookkeeping, the divergence guard and early stopping for one pass."""

    def __init__(self, phase, records, config):
        self.phase = phase
        self.records = records
        self.floor = config.divergence_floor
        self.patience = config.patience
        self.min_improvement = config.min_improvement
        self.initial = None
        self.best = math.inf
        self.best_vars = None
        self.stale = 0

    def see(self, it, loss, variables, parts=None, data=None):
        """Record one evaluation; returns True when the pass should stop early.

        ``data`` is the reprojection part of ``loss``. The divergence guard
        watches it alone: a regulariser spike after one oversized step is
        not a blow-up and best-iterate retention already discards it.
        """
        data = loss if data is None else data
        if self.initial is None:
            self.initial = data
        if not (math.isfinite(loss) and math.isfinite(data)) or data > DIVERGENCE_FACTOR * max(self.initial, self.floor):
            raise Divergence(self.phase, it, data, self.initial)
        rec = {"phase": self.phase, "iteration": it, "loss": float(loss)}
        if parts:
            rec.update({k: parts[k] for k in ("flow", "disp")})
        self.records.append(rec)
        if loss < self.best * (1.0 - self.min_improvement) or self.best_vars is None:
            self.stale = 0
        else:
            self.stale += 1
        if loss < self.best:
            self.best = loss
            self.best_vars = [np.copy(v) for v in variables]
        return self.patience > 0 and self.stale >= self.patience


# ----------------------------------------------------------------- phases


def phase1_scale_alignment(graph, state, config, records=None, problem=None):
    """Fit ``s_i``, ``beta_i`` and the confidences with poses held fixed."""
    records = [] if records is None else records
    prob = problem or RefineProblem(graph, state, config)
    lo = math.log(config.c_floor)
    F = len(state.frames)
    n_conf = state.log_conf.size
    opt = _Schedule(2 * F + n_conf, config.lr_phase1, config.iters_phase1, config)
    tr = _Tracker("phase1", records, config)
    valid = state.valid
    D = np.where(valid, state.depth, 0.0)
    n = config.iters_phase1
    for it in range(n + 1):
        loss, parts, g = prob.reproj(want_pose=False, want_conf=True)
        if tr.see(it, loss, (state.s, state.beta, state.log_conf), parts) or it == n:
            break
        gz = g["zeff"]
        gs = np.sum(gz * D, axis=(1, 2))
        gb = np.sum(np.where(valid, gz, 0.0), axis=(1, 2))
        gc = (g["conf"] * state.conf()).ravel()
        step = opt.step(np.concatenate([gs, gb, gc]))
        state.s = np.maximum(state.s + step[:F], config.s_floor)
        state.beta = state.beta + step[F : 2 * F]
        state.log_conf = np.clip(state.log_conf + step[2 * F :].reshape(state.log_conf.shape), lo, 0.0)
    state.s, state.beta, state.log_conf = tr.best_vars
    return tr.best


def _pose_pass(prob, state, config, iters, tag, records, opt):
    F = len(state.frames)
    tr = _Tracker(tag, records, config)
    for it in range(iters + 1):
        loss, parts, g = prob.reproj(want_pose=True, want_conf=False)
        lp, gp = loss_pose(state, config, with_grad=True)
        if tr.see(it, loss + lp, (state.delta,), parts, loss) or it == iters:
            break
        step = opt.step((g["delta"] + gp).ravel())
        state.delta = state.delta + step.reshape(F, 6)
    (state.delta,) = tr.best_vars
    state.bake()
    return tr.best


def _depth_pass(prob, state, config, iters, tag, records, opt):
    valid = state.valid
    ell = np.log(state.depth)
    tr = _Tracker(tag, records, config)
    s, b = state.s[:, None, None], state.beta[:, None, None]
    for it in range(iters + 1):
        loss, parts, g = prob.reproj(want_pose=False, want_conf=False, zeff=s * state.depth + b)
        if tr.see(it, loss, (state.depth,), parts) or it == iters:
            break
        gl = np.where(valid, g["zeff"] * s * state.depth, 0.0)
        ell = ell + opt.step(gl.ravel()).reshape(ell.shape)
        state.depth = np.where(valid, np.exp(ell), 1.0)
    (state.depth,) = tr.best_vars
    return tr.best


def _joint_pass(prob, state, config, iters, tag, records, opt):
    F = len(state.frames)
    valid = state.valid
    ell = np.log(state.depth)
    tr = _Tracker(tag, records, config)
    s, b = state.s[:, None, None], state.beta[:, None, None]
    for it in range(iters + 1):
        loss, parts, g = prob.reproj(want_pose=True, want_conf=False, zeff=s * state.depth + b)
        lp, gp = loss_pose(state, config, with_grad=True)
        if tr.see(it, loss + lp, (state.delta, state.depth), parts, loss) or it == iters:
            break
        gl = np.where(valid, g["zeff"] * s * state.depth, 0.0)
        step = opt.step(np.concatenate([(g["delta"] + gp).ravel(), gl.ravel()]))
        state.delta = state.delta + step[: 6 * F].reshape(F, 6)
        ell = ell + step[6 * F :].reshape(ell.shape)
        state.depth = np.where(valid, np.exp(ell), 1.0)
    state.delta, state.depth = tr.best_vars
    state.bake()
    return tr.best


def combined_objective(prob, state, config):
    """``L_reproj + L_pose`` at the current variables."""
    return prob.reproj(want_pose=False, want_conf=False)[0] + loss_pose(state, config)


def phase2_iterative(graph, state, config, records=None, problem=None, joint=False):
    """Alternate pose and depth passes ``outer_loops`` times; ``joint`` updates both at once."""
    records = [] if records is None else records
    prob = problem or RefineProblem(graph, state, config)
    history = [combined_objective(prob, state, config)]
    F, P = len(state.frames), state.depth.size
    L, lr = config.outer_loops, config.lr_phase2
    if joint:
        n = config.iters_pose + config.iters_depth
        opt = _Schedule(6 * F + P, lr, L * n, config)
    else:
        pose_opt = _Schedule(6 * F, lr, L * config.iters_pose, config)
        depth_opt = _Schedule(P, lr, L * config.iters_depth, config)
    for loop in range(L):
        if joint:
            _joint_pass(prob, state, config, n, f"phase2-joint-{loop}", records, opt)
        else:
            _pose_pass(prob, state, config, config.iters_pose, f"phase2-pose-{loop}", records, pose_opt)
            _depth_pass(prob, state, config, config.iters_depth, f"phase2-depth-{loop}", records, depth_opt)
        history.append(combined_objective(prob, state, config))
    return history


class RefinedView(NamedTuple):
    pose: PoseSE3
    depth: np.ndarray


def refine_view(state, f):
    """Current pose and effective depth of frame ``f``; invalid pixels hold inf."""
    k = state.index[FrameId(*f)]
    z = state.s[k] * state.depth[k] + state.beta[k]
    return RefinedView(state.pose(f), np.where(state.valid[k], z, np.inf))


@dataclass
class RefineResult:
    state: RefineState
    records: list
    phase1_loss: float = None
    phase2_history: list = None


def refine(graph, state, config, phase1=True, phase2=True, joint=False):
    """Run the enabled phases in order; ``state`` is updated in place."""
    records = []
    prob = RefineProblem(graph, state, config)
    p1 = phase1_scale_alignment(graph, state, config, records, prob) if phase1 and config.iters_phase1 >= 0 else None
    p2 = phase2_iterative(graph, state, config, records, prob, joint=joint) if phase2 else None
    return RefineResult(state, records, p1, p2)


__all__ = [
    "RefineConfig",
    "RefineGraph",
    "RefineState",
    "RefineProblem",
    "RefineResult",
    "RefinedView",
    "refine_view",
    "Adam",
    "build_refine_graph",
    "refine_reproject",
    "warp_depth",
    "loss_flow",
    "loss_disp",
    "loss_pose",
    "phase1_scale_alignment",
    "phase2_iterative",
    "combined_objective",
    "refine",
]
