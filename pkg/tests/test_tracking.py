import math

import numpy as np
import pytest
from scipy.optimize import minimize

from mcrecon.errors import DegenerateFit, MissingFlow, ProviderFailure
from mcrecon.evaluation import ate
from mcrecon.frames import FlowObservation, FrameId, FrameState
from mcrecon.geometry import Intrinsics, PoseSE3, pixel_grid, relative_pose, reproject, se3_exp, se3_log, so3_exp
from mcrecon.graph import EdgeKind, GraphState
from mcrecon.presets import make_rig, make_scene
from mcrecon.synthetic import (
    CameraRigSpec,
    CameraSpec,
    NoiseSpec,
    OracleFlow,
    OracleInitPrior,
    OracleMonoDepth,
    generate_scene,
)
from mcrecon.tracking import (
    AffineAlignment,
    TrackerConfig,
    _Problem,
    align_affine,
    ba_objective,
    depth_regularized_ba,
    predict_constant_velocity,
    run_tracking,
    select_ba_problem,
    wide_baseline_init,
)

from conftest import random_pose

EXACT = NoiseSpec(dynamic_weight=0.0)


# ----------------------------------------------------------- affine alignment


def test_align_exact_linear():
    a = align_affine([1, 2, 3], [2, 4, 6])
    assert abs(a.s - 2) < 1e-12 and abs(a.o) < 1e-12


def test_align_two_points():
    a = align_affine([1, 2], [3, 5])
    assert abs(a.s - 2) < 1e-12 and abs(a.o - 1) < 1e-12


def test_align_matches_explicit_normal_equations(rng):
    x = rng.uniform(0.5, 4, 200)
    y = 1.7 * x + 0.3 + rng.normal(scale=0.1, size=x.size)
    N = np.array([[np.sum(x * x), np.sum(x)], [np.sum(x), x.size]])
    b = np.array([np.sum(x * y), np.sum(y)])
    det = N[0, 0] * N[1, 1] - N[0, 1] * N[1, 0]
    inv = np.array([[N[1, 1], -N[0, 1]], [-N[1, 0], N[0, 0]]]) / det
    s, o = inv @ b
    a = align_affine(x, y)
    assert abs(a.s - s) < 1e-10 and abs(a.o - o) < 1e-10


def test_align_mask_and_nonfinite():
    a = align_affine([1, 2, 3, np.inf, 9], [2, 4, 6, 1, 0], mask=[1, 1, 1, 1, 0])
    assert abs(a.s - 2) < 1e-12


@pytest.mark.parametrize("mono,ref", [([2, 2, 2], [1, 2, 3]), ([1], [1]), ([1, 2, 3], [3, 2, 1])])
def test_align_degenerate(mono, ref):
    with pytest.raises(DegenerateFit):
        align_affine(mono, ref)


def test_alignment_apply():
    assert np.allclose(AffineAlignment(2.0, 0.5).apply(np.array([1.0, 2.0])), [2.5, 4.5])


# ------------------------------------------------------- constant velocity


def test_cv_zero_velocity(rng):
    P = random_pose(rng)
    Q = predict_constant_velocity(P, P)
    assert np.allclose(Q.matrix, P.matrix, atol=1e-12)


def test_cv_translation():
    a = PoseSE3(np.eye(3), [0, 0, 1.0])
    b = PoseSE3(np.eye(3), [0, 0, 2.0])
    assert np.allclose(predict_constant_velocity(b, a).translation, [0, 0, 3.0])


def test_cv_rotation_about_y():
    step = so3_exp(np.array([0.0, math.radians(10), 0.0]))
    Q = predict_constant_velocity(PoseSE3(step, np.zeros(3)), PoseSE3.identity())
    # group-composition oracle: two 10 degree steps = 20 degrees
    assert np.allclose(Q.rotation, so3_exp(np.array([0.0, math.radians(20), 0.0])), atol=1e-12)


# ---------------------------------------------------------------- toy BA

K2 = Intrinsics(2.0, 2.0, 0.5, 0.5, 2, 2)


def _toy(lam=0.2, seed=0):
    """Two frames of 2x2 pixels: frame 0 frozen, frame 1 free; flow carries noise."""
    rng = np.random.default_rng(seed)
    D0 = np.array([[1.0, 1.2], [0.9, 1.1]])
    D1 = np.array([[1.1, 1.0], [1.3, 0.95]])
    T0 = PoseSE3.identity()
    T1 = se3_exp(np.array([0.02, -0.03, 0.01, 0.1, 0.05, -0.02]))
    states = {
        FrameId(0, 0): FrameState(FrameId(0, 0), T0, 1 / D0, D0, np.ones((2, 2), bool), K2, frozen=True),
        FrameId(0, 1): FrameState(FrameId(0, 1), T1, 1 / D1, D1 * 1.05, np.ones((2, 2), bool), K2),
    }
    g = GraphState(1, max_edges=None)
    g.add_frame((0, 0))
    g.add_frame((0, 1))
    g.insert((0, 0), (0, 1), 1)
    g.insert((0, 1), (0, 0), 1)
    grid = pixel_grid(2, 2)
    flows = {}
    for e in g.edges.values():
        s, d = states[e.src], states[e.dst]
        r = reproject(grid, s.disparity, K2, K2, relative_pose(s.pose, d.pose))
        f = r.pixels - grid + rng.normal(scale=0.02, size=grid.shape)
        flows[e.key] = FlowObservation(f, np.full((2, 2), 1.0), np.ones((2, 2), bool))
    # start away from the optimum
    states[FrameId(0, 1)].pose = T1 @ se3_exp(np.array([0.01, 0.0, -0.01, 0.02, -0.01, 0.01]))
    states[FrameId(0, 1)].disparity = 1 / D1 * 1.04
    return g, states, flows, TrackerConfig(lambda_depth=lam, gn_iterations=100, convergence_tol=0.0, optimized_tail=2, window_capacity=2)


def _toy_objective(states, flows, lam, f1, T_start, x):
    """Per-pixel loop over both edges and the prior; shares no code with the solver."""
    if np.any(x[6:] <= 0):
        return np.inf
    poses = {FrameId(0, 0): states[FrameId(0, 0)].pose.matrix, f1: (T_start @ se3_exp(x[:6])).matrix}
    disp = {FrameId(0, 0): states[FrameId(0, 0)].disparity.ravel(), f1: x[6:]}
    total = 0.0
    for (src, dst), obs in flows.items():
        T = np.linalg.inv(poses[dst]) @ poses[src]
        for k in range(4):
            y, xx = divmod(k, 2)
            p = np.array([(xx - K2.cx) / K2.fx, (y - K2.cy) / K2.fy, 1.0]) / disp[src][k]
            q = T[:3, :3] @ p + T[:3, 3]
            u = np.array([K2.fx * q[0] / q[2] + K2.cx, K2.fy * q[1] / q[2] + K2.cy])
            target = np.array([xx, y]) + obs.flow[y, xx]
            total += obs.weight[y, xx] * float(np.sum((u - target) ** 2))
    total += lam * float(np.sum((x[6:] - 1.0 / states[f1].prior_depth.ravel()) ** 2))
    return total


def test_toy_ba_matches_derivative_free_minimiser():
    g, states, flows, cfg = _toy()
    f1 = FrameId(0, 1)
    T_start, d_start = states[f1].pose, states[f1].disparity.copy()
    x0 = np.concatenate([np.zeros(6), d_start.ravel()])
    fun = lambda x: _toy_objective(states, flows, cfg.lambda_depth, f1, T_start, x)
    assert abs(fun(x0) - ba_objective(list(g.edges.values()), states, flows, cfg.lambda_depth, [f1])) < 1e-12
    res = minimize(fun, x0, method="Powell", options={"xtol": 1e-10, "ftol": 1e-15, "maxfev": 100000})
    res = minimize(fun, res.x, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-18, "maxfev": 100000})

    depth_regularized_ba(g, states, flows, cfg)
    xi = se3_log(T_start.inverse() @ states[f1].pose)
    got = np.concatenate([xi, states[f1].disparity.ravel()])
    assert np.abs(got - res.x).max() < 1e-5


def test_toy_cost_monotone_and_frozen_untouched():
    g, states, flows, cfg = _toy(lam=0.01)
    f0 = FrameId(0, 0)
    R0, t0, d0 = states[f0].pose.rotation.copy(), states[f0].pose.translation.copy(), states[f0].disparity.copy()
    res = depth_regularized_ba(g, states, flows, cfg)
    assert res.accepted >= 1
    assert all(b <= a for a, b in zip(res.costs, res.costs[1:]))
    assert res.final_cost < res.initial_cost
    assert np.array_equal(states[f0].pose.rotation, R0) and np.array_equal(states[f0].pose.translation, t0)
    assert np.array_equal(states[f0].disparity, d0)


def test_toy_objective_paths_agree():
    g, states, flows, cfg = _toy()
    f1 = FrameId(0, 1)
    edges = list(g.edges.values())
    prob = _Problem(edges, states, flows, cfg.lambda_depth, [f1])
    poses = {f: s.pose for f, s in states.items()}
    disps = {f: s.disparity.ravel() for f, s in states.items()}
    a = prob.cost(poses, disps)
    b = ba_objective(edges, states, flows, cfg.lambda_depth, [f1])
    assert abs(a - b) <= 1e-10 * max(1.0, abs(b))
    assert abs(prob.linearize(poses, disps)[0] - b) <= 1e-10 * max(1.0, abs(b))


def test_missing_flow_raises():
    g, states, flows, cfg = _toy()
    flows.pop(next(iter(flows)))
    with pytest.raises(MissingFlow):
        depth_regularized_ba(g, states, flows, cfg)


def test_zero_lambda_leaves_scale_free():
    # with the prior removed a global scale of translations and depths costs nothing
    g, states, flows, _ = _toy()
    edges = list(g.edges.values())
    free = [FrameId(0, 1)]

    def scaled(k):
        out = {}
        for f, s in states.items():
            out[f] = FrameState(f, PoseSE3(s.pose.rotation, k * s.pose.translation), s.disparity / k, s.prior_depth, s.valid, K2)
        return out

    for lam, same in ((0.0, True), (0.2, False)):
        a = ba_objective(edges, states, flows, lam, free)
        b = ba_objective(edges, scaled(1.7), flows, lam, free)
        assert (abs(a - b) < 1e-12 * max(a, 1e-30) + 1e-15) is same


def test_anchor_added_for_unfrozen_component():
    g, states, flows, cfg = _toy()
    states[FrameId(0, 0)].frozen = False
    free, _ = select_ba_problem(g, states, cfg, free={FrameId(0, 0), FrameId(0, 1)})
    assert free == [FrameId(0, 1)]


# ---------------------------------------------------------- synthetic runs


@pytest.fixture(scope="module")
def small_gt():
    return generate_scene(make_scene("overlap", 14), make_rig("overlap", 32, 24), seed=0)


def _intr(gt):
    return [c.intrinsics for c in gt.rig.cameras]


def _pose_err(states, gt, frames):
    return max(max(np.abs(states[f].pose.translation - gt.pose(f).translation).max(), np.abs(states[f].pose.rotation - gt.pose(f).rotation).max()) for f in frames)


def test_ba_at_ground_truth_is_fixed_point(small_gt):
    gt = small_gt
    cfg = TrackerConfig(n_init=4)
    s = wide_baseline_init(2, _intr(gt), OracleInitPrior(gt, EXACT), OracleMonoDepth(gt, EXACT), OracleFlow(gt, EXACT), cfg)
    for f, st in s.states.items():
        st.pose = gt.pose(f)
        st.disparity = np.where(st.valid, 1.0 / np.where(st.valid, gt.depth_of(f), 1.0), 1.0)
    before = {f: (st.pose, st.disparity.copy()) for f, st in s.states.items()}
    res = depth_regularized_ba(s.graph, s.states, s.flows, cfg)
    assert res.initial_cost < 1e-18
    for f, st in s.states.items():
        assert np.abs(st.pose.matrix - before[f][0].matrix).max() < 1e-9
        assert np.abs(st.disparity - before[f][1]).max() < 1e-9


def test_init_exact_oracle_recovers_ground_truth(small_gt):
    gt = small_gt
    cfg = TrackerConfig()
    s = wide_baseline_init(2, _intr(gt), OracleInitPrior(gt, EXACT), OracleMonoDepth(gt, EXACT), OracleFlow(gt, EXACT), cfg)
    assert _pose_err(s.states, gt, s.states) < 1e-6
    assert abs(s.alignment.s - 1) < 1e-10 and abs(s.alignment.o) < 1e-9
    assert s.states[FrameId(0, 0)].frozen


def test_noisy_init_reduces_pose_error(small_gt):
    gt = small_gt
    noise = NoiseSpec(dynamic_weight=0.0, init_rot_noise=3.0, init_trans_noise=0.05)
    cfg = TrackerConfig()
    prior = OracleInitPrior(gt, noise)
    frames = [FrameId(c, t) for c in range(2) for t in range(cfg.n_init)]
    poses0, _ = prior.prior(frames)
    G = np.array([gt.pose(f).translation for f in frames])
    before = ate(np.array([poses0[f].translation for f in frames]), G)
    s = wide_baseline_init(2, _intr(gt), prior, OracleMonoDepth(gt, noise), OracleFlow(gt, noise), cfg)
    after = ate(np.array([s.states[f].pose.translation for f in frames]), G)
    assert after < 0.5 * before


def test_single_camera_init_has_only_temporal_edges(small_gt):
    gt = small_gt
    s = wide_baseline_init(1, _intr(gt)[:1], OracleInitPrior(gt, EXACT), OracleMonoDepth(gt, EXACT), OracleFlow(gt, EXACT), TrackerConfig())
    assert all(e.kind is EdgeKind.TEMPORAL for e in s.graph.history.values())
    assert _pose_err(s.states, gt, s.states) < 1e-6


def test_static_cameras_stay_put():
    K = make_rig("overlap", 32, 24).cameras[0].intrinsics
    rig = CameraRigSpec(
        (
            CameraSpec(K, ((-0.2, -1.0, 1.0),), ((0.0, 0.3, 0.0),)),
            CameraSpec(K, ((0.1, -1.0, 1.0),), ((0.05, 0.3, 0.0),)),
        )
    )
    gt = generate_scene(make_scene("overlap", 12), rig, seed=1)
    cfg = TrackerConfig(n_init=4)
    s = run_tracking(2, _intr(gt), 12, OracleInitPrior(gt, EXACT), OracleMonoDepth(gt, EXACT), OracleFlow(gt, EXACT), cfg)
    assert _pose_err(s.states, gt, list(gt.frames())) < 1e-6


def _camera_scale(s, gt, cam):
    ratios = [np.median(gt.depth_of(f)[gt.valid_of(f)] / s.states[f].depth[gt.valid_of(f)]) for f in s.states if f.camera == cam]
    return float(np.median(ratios))


def test_spatial_edges_unify_camera_scale():
    gt = generate_scene(make_scene("overlap", 20), make_rig("overlap", 32, 24), seed=0)
    noise = NoiseSpec(dynamic_weight=0.0, mono_camera_scale=(1.0, 1.3))
    cfg = TrackerConfig()
    s = run_tracking(2, _intr(gt), 20, OracleInitPrior(gt, noise), OracleMonoDepth(gt, noise), OracleFlow(gt, noise), cfg)
    ratio = _camera_scale(s, gt, 1) / _camera_scale(s, gt, 0)
    assert abs(ratio - 1) < 0.02


class _Remap:
    """Expose camera ``c`` of a multi-camera provider as camera 0."""

    def __init__(self, inner, c):
        self.inner, self.c = inner, c

    def _m(self, f):
        return FrameId(self.c, FrameId(*f).time)

    def flow(self, a, b):
        return self.inner.flow(self._m(a), self._m(b))

    def depth(self, f):
        return self.inner.depth(self._m(f))

    def prior(self, frames):
        poses, depths = self.inner.prior([self._m(f) for f in frames])
        return ({FrameId(*f): poses[self._m(f)] for f in frames}, {FrameId(*f): depths[self._m(f)] for f in frames})


def test_non_overlapping_cameras_track_independently():
    gt = generate_scene(make_scene("non-overlap", 12), make_rig("non-overlap", 32, 24), seed=0)
    cfg = TrackerConfig(n_init=4)
    provs = (OracleInitPrior(gt, EXACT), OracleMonoDepth(gt, EXACT), OracleFlow(gt, EXACT))
    joint = run_tracking(2, _intr(gt), 12, *provs, cfg)
    assert all(e.kind is EdgeKind.TEMPORAL for e in joint.graph.history.values())
    for c in range(2):
        solo = run_tracking(1, _intr(gt)[c : c + 1], 12, *(_Remap(p, c) for p in provs), cfg)
        for t in range(12):
            a, b = joint.states[FrameId(c, t)].pose, solo.states[FrameId(0, t)].pose
            assert np.abs(a.matrix - b.matrix).max() < 1e-6


def test_tracking_log_records(small_gt):
    gt = small_gt
    cfg = TrackerConfig(n_init=4)
    s = run_tracking(2, _intr(gt), 7, OracleInitPrior(gt, EXACT), OracleMonoDepth(gt, EXACT), OracleFlow(gt, EXACT), cfg)
    assert [r["step"] for r in s.records] == ["init", "track", "track", "track"]
    for r in s.records:
        assert r["cost_after"] <= r["cost_before"] * (1 + 1e-9) + 1e-20
        assert r["edges"] <= cfg.max_edges


def test_provider_failure_is_wrapped(small_gt):
    class Broken:
        def depth(self, f):
            raise OSError("disk gone")

    with pytest.raises(ProviderFailure):
        wide_baseline_init(2, _intr(small_gt), OracleInitPrior(small_gt, EXACT), Broken(), OracleFlow(small_gt, EXACT), TrackerConfig(n_init=4))


def test_config_validation():
    with pytest.raises(ValueError):
        TrackerConfig(lambda_depth=-1)
    with pytest.raises(ValueError):
        TrackerConfig(optimized_tail=30)
    with pytest.raises(ValueError):
        TrackerConfig(n_init=1)
    c = TrackerConfig()
    assert (c.lambda_depth, c.window_capacity, c.optimized_tail, c.n_init) == (0.005, 25, 10, 8)
