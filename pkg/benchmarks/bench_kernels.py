"""Time every hot kernel on its numba path and its numpy path.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs once per path to warm up (JIT compile for numba), then the
median of ``--repeat`` timed calls is reported together with the largest
absolute difference between the two paths' outputs.
"""

import argparse
import statistics
import time

import numpy as np

from mcrecon import _accel, kernels
from mcrecon import refinement as rf
from mcrecon.geometry import Intrinsics, pixel_grid, se3_exp
from mcrecon.presets import make_rig, make_scene
from mcrecon.synthetic import NoiseSpec, OracleFlow, generate_scene


def _flatten(out):
    if isinstance(out, tuple):
        parts = []
        for o in out:
            parts.extend(_flatten(o))
        return parts
    if isinstance(out, dict):
        return [np.asarray(out[k], dtype=float).ravel() for k in sorted(out)]
    return [np.asarray(out, dtype=float).ravel()]


def _max_diff(a, b):
    worst = 0.0
    for x, y in zip(_flatten(a), _flatten(b)):
        both = np.isfinite(x) & np.isfinite(y)
        if not np.array_equal(np.isfinite(x), np.isfinite(y)):
            return float("inf")
        if both.any():
            worst = max(worst, float(np.abs(x[both] - y[both]).max()))
    return worst


def heightfield_case(rng):
    waves = np.column_stack([rng.uniform(1, 4, 6), rng.uniform(1, 4, 6), rng.uniform(0, 6, 6), rng.uniform(0.01, 0.03, 6)])
    origin = np.array([0.0, 0.0, 1.5])
    dirs = np.column_stack([rng.uniform(-1, 1, 64 * 48), rng.uniform(-1, 1, 64 * 48), np.full(64 * 48, -1.0)])
    bound = float(np.abs(waves[:, 3]).sum())
    return lambda: kernels.raycast_heightfield(origin, dirs, waves, bound)


def zbuffer_case(rng):
    n = 64 * 48
    target = rng.integers(-1, n, size=20 * n)
    values = rng.uniform(0.5, 5.0, size=20 * n)
    return lambda: kernels.zbuffer_scatter(target, values, n)


def ba_edge_case(rng):
    K = Intrinsics(60.0, 60.0, 31.5, 23.5, 64, 48)
    grid = pixel_grid(48, 64).reshape(-1, 2)
    rays = np.column_stack([(grid[:, 0] - K.cx) / K.fx, (grid[:, 1] - K.cy) / K.fy, np.ones(len(grid))])
    disp = rng.uniform(0.2, 1.0, len(grid))
    T = se3_exp(np.array([0.01, -0.02, 0.01, 0.05, 0.0, -0.02]))
    target = grid + rng.normal(scale=0.5, size=grid.shape)
    w = rng.uniform(0.5, 1.0, len(grid))
    return lambda: kernels.ba_edge(disp, rays, w, target, T.rotation, T.translation, K, 1e-4)


def refine_case(rng):
    gt = generate_scene(make_scene("overlap", 8), make_rig("overlap", 32, 24), seed=0)
    frames = sorted(gt.frames())
    flows = OracleFlow(gt, NoiseSpec(flow_noise=0.3), seed=1)
    pairs = [(a, b) for a in frames for b in frames if a != b and abs(a.time - b.time) <= 2]
    graph = rf.build_refine_graph(pairs, {c: 8 for c in range(gt.n_cameras)}, (), flows)
    K = [gt.intrinsics(c) for c in range(gt.n_cameras)]
    state = rf.RefineState.from_maps({f: gt.pose(f) for f in frames}, {f: gt.depth_of(f) * 1.1 for f in frames}, K, {f: gt.valid_of(f) for f in frames})
    prob = rf.RefineProblem(graph, state, rf.RefineConfig())
    return lambda: prob.gradients()


CASES = {
    "raycast_heightfield (3072 rays)": heightfield_case,
    "zbuffer_scatter (61k writes)": zbuffer_case,
    "ba_edge (3072 px)": ba_edge_case,
    "refine gradients (32x24, 16 frames)": refine_case,
}


def timed(fn, repeat):
    samples = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return statistics.median(samples)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; only the numpy path can run")
    print(f"{'kernel':40s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, make in CASES.items():
        fn = make(np.random.default_rng(0))
        results = {}
        for use in (False, True):
            if use and not _accel.HAVE_NUMBA:
                continue
            _accel.USE_NUMBA = use
            out = fn()
            results[use] = (timed(fn, args.repeat), out)
        t_np, out_np = results[False]
        if True in results:
            t_nb, out_nb = results[True]
            print(f"{name:40s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:7.1f}x {_max_diff(out_np, out_nb):11.1e}")
        else:
            print(f"{name:40s} {1e3 * t_np:10.2f} {'-':>10s}")
    _accel.USE_NUMBA = _accel.HAVE_NUMBA


if __name__ == "__main__":
    main()
