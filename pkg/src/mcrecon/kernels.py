"""Hot inner loops: heightfield ray casting, z-buffered scatter and the
per-edge normal-equation accumulation used by bundle adjustment.

Each kernel exists as an ``@njit`` loop (``*_nb``) and a vectorised numpy
version (``*_np``). The public names dispatch on :data:`_accel.USE_NUMBA`.
"""

import numpy as np

from . import _accel
from ._accel import njit

ROOT_ITERS = 60
ROOT_TOL = 1e-13


# ---------------------------------------------------------------- heightfield


def terrain_height_np(x, y, waves):
    """Sum of plane waves; ``waves`` rows are ``(kx, ky, amplitude, phase)``."""
    h = np.zeros(np.broadcast(x, y).shape)
    for kx, ky, amp, phase in waves:
        h = h + amp * np.sin(kx * x + ky * y + phase)
    return h


@njit(nogil=True)
def _height_nb(x, y, waves):
    h = 0.0
    for k in range(waves.shape[0]):
        h += waves[k, 2] * np.sin(waves[k, 0] * x + waves[k, 1] * y + waves[k, 3])
    return h


def terrain_slope_bound(waves):
    """Upper bound on the horizontal gradient magnitude of the heightfield."""
    waves = np.asarray(waves, dtype=float).reshape(-1, 4)
    return float(np.sum(np.abs(waves[:, 2]) * np.hypot(waves[:, 0], waves[:, 1])))


@njit(nogil=True)
def raycast_heightfield_nb(origin, dirs, waves, z_bound, min_step, far):
    n = dirs.shape[0]
    out = np.full(n, np.inf)
    ox, oy, oz = origin[0], origin[1], origin[2]
    slope = 0.0
    for k in range(waves.shape[0]):
        slope += abs(waves[k, 2]) * np.sqrt(waves[k, 0] ** 2 + waves[k, 1] ** 2)
    for r in range(n):
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        # the surface lives inside |z| <= z_bound; only march that slab
        if dz == 0.0:
            if abs(oz) > z_bound:
                continue
            lo, hi = 0.0, far
        else:
            a = (z_bound - oz) / dz
            b = (-z_bound - oz) / dz
            lo = min(a, b)
            hi = max(a, b)
            if lo < 0.0:
                lo = 0.0
            if hi > far:
                hi = far
        if hi <= lo:
            continue
        # height above terrain shrinks at most this fast per unit ray parameter
        rate = abs(dz) + slope * np.sqrt(dx * dx + dy * dy)
        prev_l = lo
        f = oz + lo * dz - _height_nb(ox + lo * dx, oy + lo * dy, waves)
        if f <= 0.0:
            continue
        found = False
        l = lo
        while l < hi:
            prev_l = l
            l = min(l + max(f / rate, min_step), hi)
            f = oz + l * dz - _height_nb(ox + l * dx, oy + l * dy, waves)
            if f <= 0.0:
                found = True
                break
        if not found:
            continue
        # Illinois regula falsi on the bracket [prev_l (above), l (below)]
        a_l, b_l = prev_l, l
        fa = oz + a_l * dz - _height_nb(ox + a_l * dx, oy + a_l * dy, waves)
        fb = f
        side = 0
        for _ in range(ROOT_ITERS):
            if b_l - a_l <= ROOT_TOL:
                break
            m = b_l - fb * (b_l - a_l) / (fb - fa)
            if not (a_l < m < b_l):
                m = 0.5 * (a_l + b_l)
            fm = oz + m * dz - _height_nb(ox + m * dx, oy + m * dy, waves)
            if fm > 0.0:
                a_l, fa = m, fm
                if side == 1:
                    fb *= 0.5
                side = 1
            else:
                b_l, fb = m, fm
                if side == -1:
                    fa *= 0.5
                side = -1
            if fm == 0.0:
                a_l = m
                break
        out[r] = b_l if fb == 0.0 else (a_l if b_l - a_l <= ROOT_TOL else b_l - fb * (b_l - a_l) / (fb - fa))
    return out


def raycast_heightfield_np(origin, dirs, waves, z_bound, min_step, far):
    origin = np.asarray(origin, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    n = dirs.shape[0]
    out = np.full(n, np.inf)
    ox, oy, oz = origin
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (z_bound - oz) / dz
        b = (-z_bound - oz) / dz
    lo = np.where(dz == 0.0, 0.0, np.minimum(a, b))
    hi = np.where(dz == 0.0, far, np.maximum(a, b))
    if abs(oz) > z_bound:
        hi = np.where(dz == 0.0, -1.0, hi)
    lo = np.maximum(lo, 0.0)
    hi = np.minimum(hi, far)
    rate = np.abs(dz) + terrain_slope_bound(waves) * np.hypot(dirs[:, 0], dirs[:, 1])

    def f(lam):
        return oz + lam * dz - terrain_height_np(ox + lam * dirs[:, 0], oy + lam * dirs[:, 1], waves)

    fc = f(lo)
    searching = (hi > lo) & (fc > 0.0)
    prev_l = lo.copy()
    cur = lo.copy()
    found = np.zeros(n, dtype=bool)
    while searching.any():
        prev_l = np.where(searching, cur, prev_l)
        cur = np.where(searching, np.minimum(cur + np.maximum(fc / rate, min_step), hi), cur)
        fc = np.where(searching, f(cur), fc)
        hit = searching & (fc <= 0.0)
        found |= hit
        searching &= ~hit & (cur < hi)
    a_l = prev_l[found]
    b_l = cur[found]
    d = dirs[found]

    def g(lam):
        return oz + lam * d[:, 2] - terrain_height_np(ox + lam * d[:, 0], oy + lam * d[:, 1], waves)

    fa = g(a_l)
    fb = fc[found]
    side = np.zeros(a_l.size, dtype=np.int64)
    live = np.ones(a_l.size, dtype=bool)
    for _ in range(ROOT_ITERS):
        live &= b_l - a_l > ROOT_TOL
        if not live.any():
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            m = b_l - fb * (b_l - a_l) / (fb - fa)
        m = np.where((a_l < m) & (m < b_l), m, 0.5 * (a_l + b_l))
        fm = g(m)
        up = live & (fm > 0.0)
        dn = live & ~(fm > 0.0)
        fb = np.where(up & (side == 1), 0.5 * fb, fb)
        a_l = np.where(up, m, a_l)
        fa = np.where(up, fm, fa)
        fa = np.where(dn & (side == -1), 0.5 * fa, fa)
        b_l = np.where(dn, m, b_l)
        fb = np.where(dn, fm, fb)
        side = np.where(up, 1, np.where(dn, -1, side))
        zero = live & (fm == 0.0)
        a_l = np.where(zero, m, a_l)
        live &= ~zero
    with np.errstate(divide="ignore", invalid="ignore"):
        est = b_l - fb * (b_l - a_l) / (fb - fa)
    out[found] = np.where(fb == 0.0, b_l, np.where(b_l - a_l <= ROOT_TOL, a_l, est))
    return out


def raycast_heightfield(origin, dirs, waves, z_bound, step=1e-3, far=50.0):
    """Ray parameter of the first terrain crossing for rays ``origin + lam * dirs``.

    Marching takes the largest step that cannot skip the surface given the
    wave slope bound, but never less than ``step``. Misses are ``inf``. When ``dirs`` have unit camera-frame z the parameter is
    the camera depth.
    """
    origin = np.ascontiguousarray(origin, dtype=float)
    dirs = np.ascontiguousarray(dirs, dtype=float).reshape(-1, 3)
    waves = np.ascontiguousarray(waves, dtype=float).reshape(-1, 4)
    if _accel.USE_NUMBA:
        return raycast_heightfield_nb(origin, dirs, waves, float(z_bound), float(step), float(far))
    return raycast_heightfield_np(origin, dirs, waves, float(z_bound), float(step), float(far))


def raycast_box(origin, dirs, lo, hi):
    """Entry parameter of rays into an axis-aligned box (slab test); ``inf`` on miss."""
    origin = np.asarray(origin, dtype=float)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (np.asarray(lo) - origin) * inv
        t2 = (np.asarray(hi) - origin) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    hit = (tmax >= tmin) & (tmax > 0.0)
    enter = np.where(tmin > 0.0, tmin, np.inf)
    return np.where(hit, enter, np.inf)


# ------------------------------------------------------------ z-buffer scatter


@njit(nogil=True)
def zbuffer_scatter_nb(target, values, n_targets):
    buf = np.full(n_targets, np.inf)
    winner = np.full(n_targets, -1, dtype=np.int64)
    for k in range(target.shape[0]):
        t = target[k]
        if t < 0:
            continue
        v = values[k]
        # strict < keeps the lowest source index on exact ties
        if v < buf[t]:
            buf[t] = v
            winner[t] = k
    return buf, winner


def zbuffer_scatter_np(target, values, n_targets):
    target = np.asarray(target, dtype=np.int64)
    values = np.asarray(values, dtype=float)
    buf = np.full(n_targets, np.inf)
    winner = np.full(n_targets, -1, dtype=np.int64)
    idx = np.flatnonzero((target >= 0) & (values < np.inf))
    if idx.size == 0:
        return buf, winner
    order = np.lexsort((idx, values[idx], target[idx]))
    srt = idx[order]
    tg = target[srt]
    first = np.ones(srt.size, dtype=bool)
    first[1:] = tg[1:] != tg[:-1]
    buf[tg[first]] = values[srt[first]]
    winner[tg[first]] = srt[first]
    return buf, winner


def zbuffer_scatter(target, values, n_targets):
    """Scatter ``values`` into ``n_targets`` cells keeping the smallest per cell.

    ``target < 0`` entries are skipped. Returns ``(buffer, winner)`` where
    ``winner`` holds the source index that won each cell (``-1`` if empty).
    """
    target = np.ascontiguousarray(target, dtype=np.int64).ravel()
    values = np.ascontiguousarray(values, dtype=float).ravel()
    if _accel.USE_NUMBA:
        return zbuffer_scatter_nb(target, values, int(n_targets))
    return zbuffer_scatter_np(target, values, int(n_targets))


# ------------------------------------------------------- bundle adjustment


@njit(nogil=True)
def ba_edge_nb(disp, rays, w, target, R, t, fx, fy, cx, cy, z_min, H, g, hdd, gd, C):
    n = disp.shape[0]
    for a in range(12):
        g[a] = 0.0
        for b in range(12):
            H[a, b] = 0.0
    J = np.empty((2, 13))
    res = np.empty(2)
    cost = 0.0
    for k in range(n):
        hdd[k] = 0.0
        gd[k] = 0.0
        for a in range(12):
            C[k, a] = 0.0
        wk = w[k]
        if wk <= 0.0:
            continue
        d = disp[k]
        px = rays[k, 0] / d
        py = rays[k, 1] / d
        pz = rays[k, 2] / d
        qx = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + t[0]
        qy = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + t[1]
        qz = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + t[2]
        if qz <= z_min:
            continue
        iz = 1.0 / qz
        res[0] = fx * qx * iz + cx - target[k, 0]
        res[1] = fy * qy * iz + cy - target[k, 1]
        cost += wk * (res[0] * res[0] + res[1] * res[1])
        for r in range(2):
            # row r of the projection Jacobian
            if r == 0:
                a0, a1, a2 = fx * iz, 0.0, -fx * qx * iz * iz
            else:
                a0, a1, a2 = 0.0, fy * iz, -fy * qy * iz * iz
            m0 = a0 * R[0, 0] + a1 * R[1, 0] + a2 * R[2, 0]
            m1 = a0 * R[0, 1] + a1 * R[1, 1] + a2 * R[2, 1]
            m2 = a0 * R[0, 2] + a1 * R[1, 2] + a2 * R[2, 2]
            # source pose: [p x m, m]
            J[r, 0] = py * m2 - pz * m1
            J[r, 1] = pz * m0 - px * m2
            J[r, 2] = px * m1 - py * m0
            J[r, 3] = m0
            J[r, 4] = m1
            J[r, 5] = m2
            # target pose: [a x q, -a]
            J[r, 6] = a1 * qz - a2 * qy
            J[r, 7] = a2 * qx - a0 * qz
            J[r, 8] = a0 * qy - a1 * qx
            J[r, 9] = -a0
            J[r, 10] = -a1
            J[r, 11] = -a2
            J[r, 12] = -(m0 * px + m1 * py + m2 * pz) / d
        for r in range(2):
            wr = wk * res[r]
            jd = J[r, 12]
            hdd[k] += wk * jd * jd
            gd[k] += wr * jd
            for a in range(12):
                ja = wk * J[r, a]
                g[a] += wr * J[r, a]
                C[k, a] += ja * jd
                for b in range(a, 12):
                    H[a, b] += ja * J[r, b]
    for a in range(12):
        for b in range(a + 1, 12):
            H[b, a] = H[a, b]
    return cost


def ba_edge_np(disp, rays, w, target, R, t, fx, fy, cx, cy, z_min, H, g, hdd, gd, C):
    p = rays / disp[:, None]
    q = p @ R.T + t
    use = (w > 0.0) & (q[:, 2] > z_min)
    qz = np.where(use, q[:, 2], 1.0)
    iz = 1.0 / qz
    res = np.stack([fx * q[:, 0] * iz + cx, fy * q[:, 1] * iz + cy], axis=1) - target
    res[~use] = 0.0
    wk = np.where(use, w, 0.0)
    A = np.zeros((disp.size, 2, 3))
    A[:, 0, 0] = fx * iz
    A[:, 0, 2] = -fx * q[:, 0] * iz * iz
    A[:, 1, 1] = fy * iz
    A[:, 1, 2] = -fy * q[:, 1] * iz * iz
    M = A @ R
    J = np.empty((disp.size, 2, 13))
    J[:, :, 0:3] = np.cross(p[:, None, :], M)
    J[:, :, 3:6] = M
    J[:, :, 6:9] = np.cross(A, q[:, None, :])
    J[:, :, 9:12] = -A
    J[:, :, 12] = -np.einsum("nrc,nc->nr", M, p) / disp[:, None]
    Jw = J * wk[:, None, None]
    H[:] = np.einsum("nra,nrb->ab", Jw[:, :, :12], J[:, :, :12])
    g[:] = np.einsum("nra,nr->a", Jw[:, :, :12], res)
    hdd[:] = np.einsum("nr,nr->n", Jw[:, :, 12], J[:, :, 12])
    gd[:] = np.einsum("nr,nr->n", Jw[:, :, 12], res)
    C[:] = np.einsum("nra,nr->na", Jw[:, :, :12], J[:, :, 12])
    return float(np.sum(wk * np.sum(res * res, axis=1)))


@njit(nogil=True)
def ba_edge_cost_nb(disp, rays, w, target, R, t, fx, fy, cx, cy, z_min):
    cost = 0.0
    for k in range(disp.shape[0]):
        wk = w[k]
        if wk <= 0.0:
            continue
        d = disp[k]
        px = rays[k, 0] / d
        py = rays[k, 1] / d
        pz = rays[k, 2] / d
        qz = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + t[2]
        if qz <= z_min:
            continue
        qx = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + t[0]
        qy = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + t[1]
        rx = fx * qx / qz + cx - target[k, 0]
        ry = fy * qy / qz + cy - target[k, 1]
        cost += wk * (rx * rx + ry * ry)
    return cost


def ba_edge_cost_np(disp, rays, w, target, R, t, fx, fy, cx, cy, z_min):
    q = (rays / disp[:, None]) @ R.T + t
    use = (w > 0.0) & (q[:, 2] > z_min)
    qz = np.where(use, q[:, 2], 1.0)
    rx = fx * q[:, 0] / qz + cx - target[:, 0]
    ry = fy * q[:, 1] / qz + cy - target[:, 1]
    return float(np.sum(np.where(use, w * (rx * rx + ry * ry), 0.0)))


def ba_edge(disp, rays, w, target, R, t, K, z_min):
    """Linearise one edge: returns ``(cost, H, g, hdd, gd, C)``.

    ``H`` (12x12) and ``g`` (12) are the pose block over ``(source, target)``
    twists; ``hdd``, ``gd`` are per-pixel disparity terms and ``C`` (P, 12)
    the pose-disparity coupling. Everything is ``J^T W J`` / ``J^T W r``.
    """
    n = disp.shape[0]
    H = np.empty((12, 12))
    g = np.empty(12)
    hdd = np.empty(n)
    gd = np.empty(n)
    C = np.empty((n, 12))
    fn = ba_edge_nb if _accel.USE_NUMBA else ba_edge_np
    cost = fn(disp, rays, w, target, R, t, K.fx, K.fy, K.cx, K.cy, z_min, H, g, hdd, gd, C)
    return cost, H, g, hdd, gd, C


def ba_edge_cost(disp, rays, w, target, R, t, K, z_min):
    fn = ba_edge_cost_nb if _accel.USE_NUMBA else ba_edge_cost_np
    return fn(disp, rays, w, target, R, t, K.fx, K.fy, K.cx, K.cy, z_min)


# ------------------------------------------------------------- refinement
#
# One call evaluates L_flow and L_disp over every edge of the refinement
# graph. Each edge is handled in a single sweep: flow terms and the edge's
# z-buffer of flow targets first, then the depth-ratio terms of the winners.
# Gradients are accumulated unnormalised, in separate flow and ratio buffers,
# and scaled by the global mask counts once every edge has been seen.


@njit(nogil=True)
def refine_terms_nb(src, dst, R, t, tidx, emask, tgt, conf, logc, zeff, fvalid, frame_cam, rays, Kc, z_min, lam,
                    want_pose, want_conf, want_disp, gz_f, gz_d, gc_f, gc_d, gs_f, gs_d, gd_f, gd_d, win, stats):
    E, P = tidx.shape
    bestz = np.empty(P)
    Mf = 0
    Md = 0
    Sf = 0.0
    Sd = 0.0
    Bf = 0.0
    Bd = 0.0
    for e in range(E):
        i = src[e]
        j = dst[e]
        ci = frame_cam[i]
        cj = frame_cam[j]
        fx = Kc[cj, 0]
        fy = Kc[cj, 1]
        cx = Kc[cj, 2]
        cy = Kc[cj, 3]
        R00 = R[e, 0, 0]
        R01 = R[e, 0, 1]
        R02 = R[e, 0, 2]
        R10 = R[e, 1, 0]
        R11 = R[e, 1, 1]
        R12 = R[e, 1, 2]
        R20 = R[e, 2, 0]
        R21 = R[e, 2, 1]
        R22 = R[e, 2, 2]
        t0 = t[e, 0]
        t1 = t[e, 1]
        t2 = t[e, 2]
        for k in range(P):
            bestz[k] = np.inf
            win[e, k] = -1
        fs0 = fs1 = fs2 = fs3 = fs4 = fs5 = 0.0
        fd0 = fd1 = fd2 = fd3 = fd4 = fd5 = 0.0
        for p in range(P):
            if not emask[e, p] or not fvalid[i, p]:
                continue
            z = zeff[i, p]
            if z <= 0.0:
                continue
            r0 = rays[ci, p, 0]
            r1 = rays[ci, p, 1]
            r2 = rays[ci, p, 2]
            a2 = R20 * r0 + R21 * r1 + R22 * r2
            qz = z * a2 + t2
            if qz <= z_min:
                continue
            a0 = R00 * r0 + R01 * r1 + R02 * r2
            a1 = R10 * r0 + R11 * r1 + R12 * r2
            qx = z * a0 + t0
            qy = z * a1 + t1
            Mf += 1
            k = tidx[e, p]
            if k >= 0 and qz < bestz[k]:
                bestz[k] = qz
                win[e, k] = p
            iz = 1.0 / qz
            dx = fx * qx * iz + cx - tgt[e, p, 0]
            dy = fy * qy * iz + cy - tgt[e, p, 1]
            l1 = abs(dx) + abs(dy)
            c = conf[e, p]
            Sf += c * l1
            Bf -= logc[e, p]
            if want_conf:
                gc_f[e, p] = l1 - lam / c
            # branch-free signs: near the optimum they are close to random
            sx = c * np.sign(dx)
            sy = c * np.sign(dy)
            gx = sx * fx * iz
            gy = sy * fy * iz
            gz = -(gx * qx + gy * qy) * iz
            gz_f[i, p] += gx * a0 + gy * a1 + gz * a2
            if want_pose:
                h0 = R00 * gx + R10 * gy + R20 * gz
                h1 = R01 * gx + R11 * gy + R21 * gz
                h2 = R02 * gx + R12 * gy + R22 * gz
                px = z * r0
                py = z * r1
                pz = z * r2
                fs0 += py * h2 - pz * h1
                fs1 += pz * h0 - px * h2
                fs2 += px * h1 - py * h0
                fs3 += h0
                fs4 += h1
                fs5 += h2
                fd0 += gy * qz - gz * qy
                fd1 += gz * qx - gx * qz
                fd2 += gx * qy - gy * qx
                fd3 -= gx
                fd4 -= gy
                fd5 -= gz
        gs_f[e, 0] = fs0
        gs_f[e, 1] = fs1
        gs_f[e, 2] = fs2
        gs_f[e, 3] = fs3
        gs_f[e, 4] = fs4
        gs_f[e, 5] = fs5
        gd_f[e, 0] = fd0
        gd_f[e, 1] = fd1
        gd_f[e, 2] = fd2
        gd_f[e, 3] = fd3
        gd_f[e, 4] = fd4
        gd_f[e, 5] = fd5
        if not want_disp:
            continue
        ds0 = ds1 = ds2 = ds3 = ds4 = ds5 = 0.0
        dd0 = dd1 = dd5 = 0.0
        for k in range(P):
            p = win[e, k]
            if p < 0:
                continue
            b = zeff[j, k]
            if not fvalid[j, k] or b <= 0.0:
                win[e, k] = -1
                continue
            Md += 1
            a = bestz[k]
            up = np.float64(a >= b)
            ib = 1.0 / b
            ia = 1.0 / a
            ratio = up * (a * ib) + (1.0 - up) * (b * ia) - 1.0
            da = up * ib - (1.0 - up) * b * ia * ia
            db = (1.0 - up) * ia - up * a * ib * ib
            c = conf[e, p]
            Sd += c * ratio
            Bd -= logc[e, p]
            if want_conf:
                gc_d[e, p] = ratio - lam / c
            ga = c * da
            gz_d[j, k] += c * db
            r0 = rays[ci, p, 0]
            r1 = rays[ci, p, 1]
            r2 = rays[ci, p, 2]
            gz_d[i, p] += ga * (R20 * r0 + R21 * r1 + R22 * r2)
            if want_pose:
                z = zeff[i, p]
                px = z * r0
                py = z * r1
                pz = z * r2
                qx = z * (R00 * r0 + R01 * r1 + R02 * r2) + t0
                qy = z * (R10 * r0 + R11 * r1 + R12 * r2) + t1
                h0 = R20 * ga
                h1 = R21 * ga
                h2 = R22 * ga
                ds0 += py * h2 - pz * h1
                ds1 += pz * h0 - px * h2
                ds2 += px * h1 - py * h0
                ds3 += h0
                ds4 += h1
                ds5 += h2
                dd0 -= ga * qy
                dd1 += ga * qx
                dd5 -= ga
        gs_d[e, 0] = ds0
        gs_d[e, 1] = ds1
        gs_d[e, 2] = ds2
        gs_d[e, 3] = ds3
        gs_d[e, 4] = ds4
        gs_d[e, 5] = ds5
        gd_d[e, 0] = dd0
        gd_d[e, 1] = dd1
        gd_d[e, 5] = dd5
    stats[0] = Sf
    stats[1] = Sd
    stats[2] = Mf
    stats[3] = Md
    stats[4] = Bf
    stats[5] = Bd


def refine_terms_np(src, dst, R, t, tidx, emask, tgt, conf, logc, zeff, fvalid, frame_cam, rays, Kc, z_min, lam,
                    want_pose, want_conf, want_disp, gz_f, gz_d, gc_f, gc_d, gs_f, gs_d, gd_f, gd_d, win, stats):
    E, P = tidx.shape
    Mf = Md = 0
    Sf = Sd = Bf = Bd = 0.0
    for e in range(E):
        i, j = src[e], dst[e]
        fx, fy, cx, cy = Kc[frame_cam[j]]
        ray = rays[frame_cam[i]]
        z = zeff[i]
        A = ray @ R[e].T
        with np.errstate(invalid="ignore"):
            q = z[:, None] * A + t[e]
        ok = emask[e] & fvalid[i] & (z > 0.0)
        ok &= np.where(ok, q[:, 2], -np.inf) > z_min
        idx = np.flatnonzero(ok)
        Mf += idx.size
        zi, Ae, qe = z[idx], A[idx], q[idx]
        iz = 1.0 / qe[:, 2]
        dx = fx * qe[:, 0] * iz + cx - tgt[e, idx, 0]
        dy = fy * qe[:, 1] * iz + cy - tgt[e, idx, 1]
        l1 = np.abs(dx) + np.abs(dy)
        c = conf[e, idx]
        Sf += float(np.sum(c * l1))
        Bf -= float(np.sum(logc[e, idx]))
        if want_conf:
            gc_f[e, idx] = l1 - lam / c
        g = np.stack([c * np.sign(dx) * fx * iz, c * np.sign(dy) * fy * iz, np.zeros(idx.size)], axis=1)
        g[:, 2] = -(g[:, 0] * qe[:, 0] + g[:, 1] * qe[:, 1]) * iz
        np.add.at(gz_f[i], idx, np.sum(g * Ae, axis=1))
        if want_pose:
            h = g @ R[e]
            p = zi[:, None] * ray[idx]
            gs_f[e, :3] += np.cross(p, h).sum(axis=0)
            gs_f[e, 3:] += h.sum(axis=0)
            gd_f[e, :3] += np.cross(g, qe).sum(axis=0)
            gd_f[e, 3:] -= g.sum(axis=0)
        _, w = zbuffer_scatter_np(np.where(ok, tidx[e], -1), np.where(ok, q[:, 2], np.inf), P)
        if not want_disp:
            win[e] = w
            continue
        keep = (w >= 0) & fvalid[j] & (zeff[j] > 0.0)
        w[~keep] = -1
        win[e] = w
        ks = np.flatnonzero(keep)
        Md += ks.size
        ps = w[ks]
        a = q[ps, 2]
        b = zeff[j, ks]
        up = a >= b
        ratio = np.where(up, a / b, b / a) - 1.0
        da = np.where(up, 1.0 / b, -b / (a * a))
        db = np.where(up, -a / (b * b), 1.0 / a)
        c = conf[e, ps]
        Sd += float(np.sum(c * ratio))
        Bd -= float(np.sum(logc[e, ps]))
        if want_conf:
            gc_d[e, ps] = ratio - lam / c
        ga = c * da
        gz_d[j, ks] += c * db
        gz_d[i, ps] += ga * A[ps, 2]
        if want_pose:
            h = ga[:, None] * R[e, 2][None, :]
            p = zeff[i, ps][:, None] * ray[ps]
            qs = q[ps]
            gs_d[e, :3] += np.cross(p, h).sum(axis=0)
            gs_d[e, 3:] += h.sum(axis=0)
            gd_d[e, 0] -= np.sum(ga * qs[:, 1])
            gd_d[e, 1] += np.sum(ga * qs[:, 0])
            gd_d[e, 5] -= np.sum(ga)
    stats[:] = (Sf, Sd, Mf, Md, Bf, Bd)


def refine_terms(src, dst, R, t, tidx, emask, tgt, logc, zeff, fvalid, frame_cam, rays, Kc, z_min, lam,
                 w_f, w_d, want_pose=True, want_conf=True):
    """Flow and depth-ratio terms of the refinement loss plus their gradients.

    ``logc`` holds the log-confidences. Returns ``(stats, g_zeff, g_conf,
    g_src, g_dst, win)``. ``stats`` is ``[S_flow, S_disp, M_flow, M_disp]``
    where the sums include the confidence barrier; gradients are of
    ``w_f * S_flow / M_flow + w_d * S_disp / M_disp`` with respect to
    effective depth, confidence and the right-perturbation twists of each
    edge's source and target pose.
    """
    E, P = tidx.shape
    F = zeff.shape[0]
    conf = np.exp(logc)
    want_disp = bool(w_d != 0.0 or want_conf)
    gz_f, gz_d = np.zeros((F, P)), np.zeros((F, P))
    gc_f, gc_d = np.zeros((E, P)), np.zeros((E, P))
    gs_f, gs_d, gd_f, gd_d = (np.zeros((E, 6)) for _ in range(4))
    win = np.empty((E, P), dtype=np.int64)
    raw = np.zeros(6)
    fn = refine_terms_nb if _accel.USE_NUMBA else refine_terms_np
    fn(src, dst, R, t, tidx, emask, tgt, conf, logc, zeff, fvalid, frame_cam, rays, Kc, float(z_min), float(lam),
       bool(want_pose), bool(want_conf), want_disp, gz_f, gz_d, gc_f, gc_d, gs_f, gs_d, gd_f, gd_d, win, raw)
    Sf, Sd, Mf, Md, Bf, Bd = raw
    stats = np.array([Sf + lam * Bf, Sd + lam * Bd, Mf, Md])
    cf = w_f / Mf if Mf > 0 else 0.0
    cd = w_d / Md if Md > 0 else 0.0
    g_zeff = cf * gz_f + cd * gz_d
    g_src = cf * gs_f + cd * gs_d
    g_dst = cf * gd_f + cd * gd_d
    g_conf = None
    if want_conf:
        g_conf = cf * gc_f + cd * gc_d
    return stats, g_zeff, g_conf, g_src, g_dst, win
