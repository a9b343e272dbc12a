"""Hot numeric kernels with two interchangeable backends.

Every kernel here exists twice: an ``@njit`` scalar-loop version and a
vectorized pure-numpy version. The active backend is chosen once at import
time from the ``LOOPDRIVE_BACKEND`` environment variable:

    LOOPDRIVE_BACKEND=numba   force the jitted kernels (error if numba missing)
    LOOPDRIVE_BACKEND=numpy   force the pure-numpy fallback
    unset                     numba when importable, numpy otherwise

Both backends compute identical values (see tests/test_kernels.py);
``benchmarks/kernel_bench.py`` compares their throughput. Kernels are pure
functions on float64 arrays and never mutate their inputs.
"""

from __future__ import annotations

import math
import os

import numpy as np

_FLAG = os.environ.get("LOOPDRIVE_BACKEND", "").strip().lower()
if _FLAG not in ("", "numba", "numpy"):
    raise ValueError(f"LOOPDRIVE_BACKEND must be 'numba' or 'numpy', got {_FLAG!r}")

if _FLAG == "numpy":
    USE_NUMBA = False
else:
    try:
        import numba

        USE_NUMBA = True
    except ImportError:
        if _FLAG == "numba":
            raise
        USE_NUMBA = False

BACKEND = "numba" if USE_NUMBA else "numpy"

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# numpy fallback implementations (vectorized)
# ---------------------------------------------------------------------------


def _world_to_frame_numpy(px, py, pyaw, pts, oriented):
    c, s = math.cos(pyaw), math.sin(pyaw)
    dx = pts[:, 0] - px
    dy = pts[:, 1] - py
    out = np.empty_like(pts)
    out[:, 0] = c * dx + s * dy
    out[:, 1] = -s * dx + c * dy
    if oriented:
        out[:, 2] = math.pi - np.mod(math.pi - (pts[:, 2] - pyaw), TWO_PI)
    else:
        out[:, 2] = 0.0
    return out


def _world_to_frame_vjp_numpy(pyaw, rel, seed, oriented):
    c, s = math.cos(pyaw), math.sin(pyaw)
    gx = seed[:, 0]
    gy = seed[:, 1]
    g = np.empty(3, dtype=np.float64)
    g[0] = np.sum(-c * gx + s * gy)
    g[1] = np.sum(-s * gx - c * gy)
    g[2] = np.sum(rel[:, 1] * gx - rel[:, 0] * gy)
    if oriented:
        g[2] -= np.sum(seed[:, 2])
    return g


def _resample_polyline_numpy(xy, m):
    n = xy.shape[0]
    seg = np.sqrt(np.sum(np.diff(xy, axis=0) ** 2, axis=1))
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0.0:
        return np.repeat(xy[:1], m, axis=0)
    targets = np.linspace(0.0, total, m)
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, n - 2)
    t0 = cum[idx]
    span = cum[idx + 1] - t0
    frac = np.where(span > 0.0, (targets - t0) / np.where(span > 0.0, span, 1.0), 0.0)
    return xy[idx] + frac[:, None] * (xy[idx + 1] - xy[idx])


def _polyline_min_distance_numpy(px, py, poly):
    a = poly[:-1]
    b = poly[1:]
    ab = b - a
    ap = np.array([px, py]) - a
    denom = np.sum(ab * ab, axis=1)
    t = np.where(denom > 0.0, np.sum(ap * ab, axis=1) / np.where(denom > 0.0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[:, None] * ab
    d2 = (closest[:, 0] - px) ** 2 + (closest[:, 1] - py) ** 2
    return math.sqrt(np.min(d2))


def _segment_max_numpy(x, starts, mask):
    n_seg = starts.shape[0] - 1
    d = x.shape[1]
    out = np.zeros((n_seg, d), dtype=np.float64)
    arg = np.full((n_seg, d), -1, dtype=np.int64)
    for e in range(n_seg):
        lo, hi = starts[e], starts[e + 1]
        valid = mask[lo:hi] > 0.0
        if not np.any(valid):
            continue
        block = np.where(valid[:, None], x[lo:hi], -np.inf)
        loc = np.argmax(block, axis=0)
        out[e] = block[loc, np.arange(d)]
        arg[e] = loc + lo
    return out, arg


def _segment_sum_numpy(x, starts):
    n_seg = starts.shape[0] - 1
    out = np.zeros((n_seg, x.shape[1]), dtype=np.float64)
    for e in range(n_seg):
        lo, hi = starts[e], starts[e + 1]
        if hi > lo:
            out[e] = np.sum(x[lo:hi], axis=0)
    return out


def _overlap_max_numpy(sdv_c, ag_c, rsum):
    # sdv_c (3,2); ag_c (m,3,2); rsum (m,3,3) indexed [agent, sdv circle, agent circle]
    diff = sdv_c[None, :, None, :] - ag_c[:, None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=3))
    ov = np.maximum(0.0, 1.0 - d / rsum)
    flat = ov.reshape(ov.shape[0], -1)
    arg = np.argmax(flat, axis=1)
    vals = flat[np.arange(flat.shape[0]), arg]
    argj = arg // ov.shape[2]
    argk = arg % ov.shape[2]
    argj = np.where(vals > 0.0, argj, -1)
    argk = np.where(vals > 0.0, argk, -1)
    return vals, argj.astype(np.int64), argk.astype(np.int64)


def _overlap_max_vjp_numpy(sdv_c, ag_c, rsum, argj, argk, seed):
    grad = np.zeros((sdv_c.shape[0], 2), dtype=np.float64)
    for i in range(ag_c.shape[0]):
        j, k = argj[i], argk[i]
        if j < 0:
            continue
        dx = sdv_c[j, 0] - ag_c[i, k, 0]
        dy = sdv_c[j, 1] - ag_c[i, k, 1]
        d = math.sqrt(dx * dx + dy * dy)
        if d <= 0.0:
            continue
        coef = -seed[i] / (rsum[i, j, k] * d)
        grad[j, 0] += coef * dx
        grad[j, 1] += coef * dy
    return grad


# ---------------------------------------------------------------------------
# numba implementations (scalar loops, identical arithmetic)
# ---------------------------------------------------------------------------

if USE_NUMBA:

    @numba.njit(cache=True)
    def _wrap_nb(a):
        return math.pi - (math.pi - a) % TWO_PI

    @numba.njit(cache=True)
    def _world_to_frame_numba(px, py, pyaw, pts, oriented):
        n = pts.shape[0]
        out = np.empty((n, 3), dtype=np.float64)
        c, s = math.cos(pyaw), math.sin(pyaw)
        for i in range(n):
            dx = pts[i, 0] - px
            dy = pts[i, 1] - py
            out[i, 0] = c * dx + s * dy
            out[i, 1] = -s * dx + c * dy
            out[i, 2] = _wrap_nb(pts[i, 2] - pyaw) if oriented else 0.0
        return out

    @numba.njit(cache=True)
    def _world_to_frame_vjp_numba(pyaw, rel, seed, oriented):
        c, s = math.cos(pyaw), math.sin(pyaw)
        g = np.zeros(3, dtype=np.float64)
        for i in range(rel.shape[0]):
            gx = seed[i, 0]
            gy = seed[i, 1]
            g[0] += -c * gx + s * gy
            g[1] += -s * gx - c * gy
            g[2] += rel[i, 1] * gx - rel[i, 0] * gy
            if oriented:
                g[2] -= seed[i, 2]
        return g

    @numba.njit(cache=True)
    def _resample_polyline_numba(xy, m):
        n = xy.shape[0]
        cum = np.empty(n, dtype=np.float64)
        cum[0] = 0.0
        for i in range(1, n):
            dx = xy[i, 0] - xy[i - 1, 0]
            dy = xy[i, 1] - xy[i - 1, 1]
            cum[i] = cum[i - 1] + math.sqrt(dx * dx + dy * dy)
        total = cum[n - 1]
        out = np.empty((m, 2), dtype=np.float64)
        if total <= 0.0:
            for j in range(m):
                out[j, 0] = xy[0, 0]
                out[j, 1] = xy[0, 1]
            return out
        k = 0
        for j in range(m):
            target = total * j / (m - 1) if m > 1 else 0.0
            while k < n - 2 and cum[k + 1] < target:
                k += 1
            span = cum[k + 1] - cum[k]
            frac = (target - cum[k]) / span if span > 0.0 else 0.0
            out[j, 0] = xy[k, 0] + frac * (xy[k + 1, 0] - xy[k, 0])
            out[j, 1] = xy[k, 1] + frac * (xy[k + 1, 1] - xy[k, 1])
        return out

    @numba.njit(cache=True)
    def _polyline_min_distance_numba(px, py, poly):
        best = 1e300
        for i in range(poly.shape[0] - 1):
            ax, ay = poly[i, 0], poly[i, 1]
            bx, by = poly[i + 1, 0], poly[i + 1, 1]
            abx, aby = bx - ax, by - ay
            denom = abx * abx + aby * aby
            t = 0.0
            if denom > 0.0:
                t = ((px - ax) * abx + (py - ay) * aby) / denom
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            cx = ax + t * abx
            cy = ay + t * aby
            d2 = (cx - px) * (cx - px) + (cy - py) * (cy - py)
            if d2 < best:
                best = d2
        return math.sqrt(best)

    @numba.njit(cache=True)
    def _segment_max_numba(x, starts, mask):
        n_seg = starts.shape[0] - 1
        d = x.shape[1]
        out = np.zeros((n_seg, d), dtype=np.float64)
        arg = np.full((n_seg, d), -1, dtype=np.int64)
        for e in range(n_seg):
            for c in range(d):
                best = -1e300
                besti = -1
                for i in range(starts[e], starts[e + 1]):
                    if mask[i] > 0.0 and x[i, c] > best:
                        best = x[i, c]
                        besti = i
                if besti >= 0:
                    out[e, c] = best
                    arg[e, c] = besti
        return out, arg

    @numba.njit(cache=True)
    def _segment_sum_numba(x, starts):
        n_seg = starts.shape[0] - 1
        d = x.shape[1]
        out = np.zeros((n_seg, d), dtype=np.float64)
        for e in range(n_seg):
            for i in range(starts[e], starts[e + 1]):
                for c in range(d):
                    out[e, c] += x[i, c]
        return out

    @numba.njit(cache=True)
    def _overlap_max_numba(sdv_c, ag_c, rsum):
        m = ag_c.shape[0]
        vals = np.zeros(m, dtype=np.float64)
        argj = np.full(m, -1, dtype=np.int64)
        argk = np.full(m, -1, dtype=np.int64)
        for i in range(m):
            best = 0.0
            bj, bk = -1, -1
            for j in range(sdv_c.shape[0]):
                for k in range(ag_c.shape[1]):
                    dx = sdv_c[j, 0] - ag_c[i, k, 0]
                    dy = sdv_c[j, 1] - ag_c[i, k, 1]
                    d = math.sqrt(dx * dx + dy * dy)
                    ov = 1.0 - d / rsum[i, j, k]
                    if ov > best:
                        best = ov
                        bj, bk = j, k
            if bj >= 0:
                vals[i] = best
                argj[i] = bj
                argk[i] = bk
        return vals, argj, argk

    @numba.njit(cache=True)
    def _overlap_max_vjp_numba(sdv_c, ag_c, rsum, argj, argk, seed):
        grad = np.zeros((sdv_c.shape[0], 2), dtype=np.float64)
        for i in range(ag_c.shape[0]):
            j, k = argj[i], argk[i]
            if j < 0:
                continue
            dx = sdv_c[j, 0] - ag_c[i, k, 0]
            dy = sdv_c[j, 1] - ag_c[i, k, 1]
            d = math.sqrt(dx * dx + dy * dy)
            if d <= 0.0:
                continue
            coef = -seed[i] / (rsum[i, j, k] * d)
            grad[j, 0] += coef * dx
            grad[j, 1] += coef * dy
        return grad


# ---------------------------------------------------------------------------
# small fixed-size geometry (plain numpy on both backends)
# ---------------------------------------------------------------------------


def rect_vertices(x: float, y: float, yaw: float, length: float, width: float) -> np.ndarray:
    """Corners of an oriented rectangle centred at (x, y), CCW order."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = 0.5 * length, 0.5 * width
    corners = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]], dtype=np.float64)
    out = np.empty_like(corners)
    out[:, 0] = x + c * corners[:, 0] - s * corners[:, 1]
    out[:, 1] = y + s * corners[:, 0] + c * corners[:, 1]
    return out


def sat_intersect(va: np.ndarray, vb: np.ndarray) -> bool:
    """Exact convex-polygon intersection via the separating-axis test."""
    for verts in (va, vb):
        n = verts.shape[0]
        for i in range(n):
            ex = verts[(i + 1) % n, 0] - verts[i, 0]
            ey = verts[(i + 1) % n, 1] - verts[i, 1]
            ax, ay = -ey, ex
            pa = va @ np.array([ax, ay])
            pb = vb @ np.array([ax, ay])
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex subject against a convex CCW clip."""
    output = [subject[i] for i in range(subject.shape[0])]
    m = clip.shape[0]
    for i in range(m):
        if not output:
            break
        a = clip[i]
        b = clip[(i + 1) % m]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inputs = output
        output = []
        for j in range(len(inputs)):
            cur = inputs[j]
            prev = inputs[j - 1]
            cur_in = ex * (cur[1] - a[1]) - ey * (cur[0] - a[0]) >= 0.0
            prev_in = ex * (prev[1] - a[1]) - ey * (prev[0] - a[0]) >= 0.0
            if cur_in != prev_in:
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = ex * dy - ey * dx
                if denom != 0.0:
                    t = (ex * (a[1] - prev[1]) - ey * (a[0] - prev[0])) / denom
                    output.append(prev + t * np.array([dx, dy]))
            if cur_in:
                output.append(cur)
    if not output:
        return np.empty((0, 2), dtype=np.float64)
    return np.asarray(output, dtype=np.float64)


def overlap_centroid(va: np.ndarray, vb: np.ndarray) -> np.ndarray | None:
    """Centroid of the intersection of two convex CCW polygons, or None."""
    poly = clip_polygon(va, vb)
    if poly.shape[0] == 0:
        return None
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * np.sum(cross)
    if abs(area) < 1e-12:
        return poly.mean(axis=0)
    cx = np.sum((x + xn) * cross) / (6.0 * area)
    cy = np.sum((y + yn) * cross) / (6.0 * area)
    return np.array([cx, cy])


# ---------------------------------------------------------------------------
# backend dispatch
# ---------------------------------------------------------------------------

if USE_NUMBA:
    world_to_frame = _world_to_frame_numba
    world_to_frame_vjp = _world_to_frame_vjp_numba
    resample_polyline = _resample_polyline_numba
    polyline_min_distance = _polyline_min_distance_numba
    segment_max = _segment_max_numba
    segment_sum = _segment_sum_numba
    overlap_max = _overlap_max_numba
    overlap_max_vjp = _overlap_max_vjp_numba
else:
    world_to_frame = _world_to_frame_numpy
    world_to_frame_vjp = _world_to_frame_vjp_numpy
    resample_polyline = _resample_polyline_numpy
    polyline_min_distance = _polyline_min_distance_numpy
    segment_max = _segment_max_numpy
    segment_sum = _segment_sum_numpy
    overlap_max = _overlap_max_numpy
    overlap_max_vjp = _overlap_max_vjp_numpy
