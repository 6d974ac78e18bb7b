# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: initializedcheck=False, language_level=3
"""Compiled hot kernels: direct 3D convolution, trilinear sampling,
nearest-neighbor search (brute force and uniform grid), and exact
point-to-triangle distances. Semantics mirror `pyimpl` exactly."""

import numpy as np

cimport cython
cimport numpy as cnp
from cython.parallel import prange
from libc.math cimport floor, sqrt

ctypedef fused real:
    float
    double


def _empty_like_dtype(const real[:] probe, shape):
    if real is float:
        return np.zeros(shape, dtype=np.float32)
    return np.zeros(shape, dtype=np.float64)


# ---------------------------------------------------------------------------
# convolution


def conv3d_forward(const real[:, :, :, ::1] x, const real[:, :, :, :, ::1] w, b,
                   int stride):
    """Row-vectorized direct convolution: the inner loop is a contiguous
    axpy over the output row, so the compiler can use SIMD."""
    cdef Py_ssize_t cin = x.shape[0], D = x.shape[1], H = x.shape[2], \
        W = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t p = k // 2
    cdef Py_ssize_t Do = (D + 2 * p - k) // stride + 1
    cdef Py_ssize_t Ho = (H + 2 * p - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * p - k) // stride + 1
    if b is not None:
        out_np = np.empty((cout, Do, Ho, Wo),
                          dtype=np.asarray(x[:1, 0, 0, 0]).dtype)
        out_np[...] = np.asarray(b).reshape(-1, 1, 1, 1)
    else:
        out_np = np.zeros((cout, Do, Ho, Wo),
                          dtype=np.asarray(x[:1, 0, 0, 0]).dtype)
    cdef real[:, :, :, ::1] out = out_np
    cdef Py_ssize_t co, od, oh, ow, ci, kz, ky, kx, iz, iy, ix, shift, lo, hi
    cdef real wv
    cdef const real * xrow
    cdef real * orow
    cdef Py_ssize_t idx, total = cout * Do
    for idx in prange(total, nogil=True, schedule="static"):
        co = idx // Do
        od = idx % Do
        for oh in range(Ho):
            orow = &out[co, od, oh, 0]
            for ci in range(cin):
                for kz in range(k):
                    iz = od * stride + kz - p
                    if iz < 0 or iz >= D:
                        continue
                    for ky in range(k):
                        iy = oh * stride + ky - p
                        if iy < 0 or iy >= H:
                            continue
                        xrow = &x[ci, iz, iy, 0]
                        for kx in range(k):
                            wv = w[co, ci, kz, ky, kx]
                            shift = kx - p
                            if stride == 1:
                                lo = 0 if shift >= 0 else -shift
                                hi = Wo if Wo <= W - shift else W - shift
                                for ow in range(lo, hi):
                                    orow[ow] = orow[ow] \
                                        + wv * xrow[ow + shift]
                            else:
                                for ow in range(Wo):
                                    ix = ow * stride + shift
                                    if 0 <= ix < W:
                                        orow[ow] = orow[ow] + wv * xrow[ix]
    return out_np


def conv3d_backward_input(const real[:, :, :, ::1] gout, const real[:, :, :, :, ::1] w,
                          x_shape, int stride):
    """Scatter form parallelized over input channel/depth rows."""
    cdef Py_ssize_t cin = x_shape[0], D = x_shape[1], H = x_shape[2], \
        W = x_shape[3]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t p = k // 2
    cdef Py_ssize_t Do = gout.shape[1], Ho = gout.shape[2], Wo = gout.shape[3]
    gx_np = np.zeros((cin, D, H, W),
                     dtype=np.asarray(gout[:1, 0, 0, 0]).dtype)
    cdef real[:, :, :, ::1] gx = gx_np
    cdef Py_ssize_t ci, iz, iy, ix, co, kz, ky, kx, od, oh, ow, num
    cdef Py_ssize_t shift, lo, hi
    cdef real wv
    cdef const real * grow
    cdef real * gxrow
    cdef Py_ssize_t idx, total = cin * D
    for idx in prange(total, nogil=True, schedule="static"):
        ci = idx // D
        iz = idx % D
        for kz in range(k):
            num = iz + p - kz
            if num % stride != 0:
                continue
            od = num // stride
            if od < 0 or od >= Do:
                continue
            for iy in range(H):
                gxrow = &gx[ci, iz, iy, 0]
                for ky in range(k):
                    num = iy + p - ky
                    if num % stride != 0:
                        continue
                    oh = num // stride
                    if oh < 0 or oh >= Ho:
                        continue
                    for co in range(cout):
                        grow = &gout[co, od, oh, 0]
                        for kx in range(k):
                            wv = w[co, ci, kz, ky, kx]
                            shift = kx - p
                            if stride == 1:
                                # ix = ow + shift must stay inside the row
                                lo = 0 if shift >= 0 else -shift
                                hi = Wo if Wo <= W - shift else W - shift
                                for ow in range(lo, hi):
                                    gxrow[ow + shift] = gxrow[ow + shift] \
                                        + wv * grow[ow]
                            else:
                                for ow in range(Wo):
                                    ix = ow * stride + shift
                                    if 0 <= ix < W:
                                        gxrow[ix] = gxrow[ix] \
                                            + wv * grow[ow]
    return gx_np


def conv3d_backward_weight(const real[:, :, :, ::1] gout, const real[:, :, :, ::1] x,
                           w_shape, int stride):
    """Row-dot form; parallel over output channels."""
    cdef Py_ssize_t cout = w_shape[0], cin = w_shape[1], k = w_shape[2]
    cdef Py_ssize_t p = k // 2
    cdef Py_ssize_t D = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Do = gout.shape[1], Ho = gout.shape[2], Wo = gout.shape[3]
    gw_np = np.zeros((cout, cin, k, k, k),
                     dtype=np.asarray(gout[:1, 0, 0, 0]).dtype)
    cdef real[:, :, :, :, ::1] gw = gw_np
    cdef Py_ssize_t co, ci, kz, ky, kx, od, oh, ow, iz, iy, ix, shift, lo, hi
    cdef real acc
    cdef const real * grow
    cdef const real * xrow
    for co in prange(cout, nogil=True, schedule="static"):
        for od in range(Do):
            for oh in range(Ho):
                grow = &gout[co, od, oh, 0]
                for ci in range(cin):
                    for kz in range(k):
                        iz = od * stride + kz - p
                        if iz < 0 or iz >= D:
                            continue
                        for ky in range(k):
                            iy = oh * stride + ky - p
                            if iy < 0 or iy >= H:
                                continue
                            xrow = &x[ci, iz, iy, 0]
                            for kx in range(k):
                                shift = kx - p
                                acc = <real> 0.0
                                if stride == 1:
                                    lo = 0 if shift >= 0 else -shift
                                    hi = Wo if Wo <= W - shift \
                                        else W - shift
                                    for ow in range(lo, hi):
                                        acc = acc + grow[ow] \
                                            * xrow[ow + shift]
                                else:
                                    for ow in range(Wo):
                                        ix = ow * stride + shift
                                        if 0 <= ix < W:
                                            acc = acc + grow[ow] * xrow[ix]
                                gw[co, ci, kz, ky, kx] = \
                                    gw[co, ci, kz, ky, kx] + acc
    return gw_np


# ---------------------------------------------------------------------------
# trilinear sampling (index-space coordinates; out-of-bounds contributes 0)


def trilinear_gather(const real[:, :, :, ::1] vol, const double[:, ::1] ijk):
    cdef Py_ssize_t C = vol.shape[0], D = vol.shape[1], H = vol.shape[2], \
        W = vol.shape[3]
    cdef Py_ssize_t n = ijk.shape[0]
    out_np = _empty_like_dtype(vol[0, 0, 0, :], (n, C))
    cdef real[:, ::1] out = out_np
    cdef Py_ssize_t i, c, di, dj, dk, ii, jj, kk, i0, j0, k0
    cdef double fx, fy, fz, tx, ty, tz, wx, wy, wz, wgt
    with nogil:
        for i in range(n):
            fx = floor(ijk[i, 0])
            fy = floor(ijk[i, 1])
            fz = floor(ijk[i, 2])
            i0 = <Py_ssize_t> fx
            j0 = <Py_ssize_t> fy
            k0 = <Py_ssize_t> fz
            tx = ijk[i, 0] - fx
            ty = ijk[i, 1] - fy
            tz = ijk[i, 2] - fz
            for di in range(2):
                ii = i0 + di
                if ii < 0 or ii >= D:
                    continue
                wx = tx if di else 1.0 - tx
                for dj in range(2):
                    jj = j0 + dj
                    if jj < 0 or jj >= H:
                        continue
                    wy = ty if dj else 1.0 - ty
                    for dk in range(2):
                        kk = k0 + dk
                        if kk < 0 or kk >= W:
                            continue
                        wz = tz if dk else 1.0 - tz
                        wgt = wx * wy * wz
                        for c in range(C):
                            out[i, c] = out[i, c] \
                                + <real> (wgt * vol[c, ii, jj, kk])
    return out_np


def trilinear_scatter(const real[:, ::1] gout, const double[:, ::1] ijk, vol_shape):
    cdef Py_ssize_t C = vol_shape[0], D = vol_shape[1], H = vol_shape[2], \
        W = vol_shape[3]
    cdef Py_ssize_t n = ijk.shape[0]
    gvol_np = _empty_like_dtype(gout[0, :], (C, D, H, W))
    cdef real[:, :, :, ::1] gvol = gvol_np
    cdef Py_ssize_t i, c, di, dj, dk, ii, jj, kk, i0, j0, k0
    cdef double fx, fy, fz, tx, ty, tz, wx, wy, wz, wgt
    for i in range(n):
        fx = floor(ijk[i, 0])
        fy = floor(ijk[i, 1])
        fz = floor(ijk[i, 2])
        i0 = <Py_ssize_t> fx
        j0 = <Py_ssize_t> fy
        k0 = <Py_ssize_t> fz
        tx = ijk[i, 0] - fx
        ty = ijk[i, 1] - fy
        tz = ijk[i, 2] - fz
        for di in range(2):
            ii = i0 + di
            if ii < 0 or ii >= D:
                continue
            wx = tx if di else 1.0 - tx
            for dj in range(2):
                jj = j0 + dj
                if jj < 0 or jj >= H:
                    continue
                wy = ty if dj else 1.0 - ty
                for dk in range(2):
                    kk = k0 + dk
                    if kk < 0 or kk >= W:
                        continue
                    wz = tz if dk else 1.0 - tz
                    wgt = wx * wy * wz
                    for c in range(C):
                        gvol[c, ii, jj, kk] = gvol[c, ii, jj, kk] \
                            + <real> (wgt * gout[i, c])
    return gvol_np


def trilinear_point_grad(const real[:, :, :, ::1] vol, const double[:, ::1] ijk,
                         const real[:, ::1] gout):
    cdef Py_ssize_t C = vol.shape[0], D = vol.shape[1], H = vol.shape[2], \
        W = vol.shape[3]
    cdef Py_ssize_t n = ijk.shape[0]
    gp_np = _empty_like_dtype(gout[0, :], (n, 3))
    cdef real[:, ::1] gp = gp_np
    cdef Py_ssize_t i, c, di, dj, dk, ii, jj, kk, i0, j0, k0
    cdef double fx, fy, fz, tx, ty, tz, wx, wy, wz, sx, sy, sz, dval
    for i in range(n):
        fx = floor(ijk[i, 0])
        fy = floor(ijk[i, 1])
        fz = floor(ijk[i, 2])
        i0 = <Py_ssize_t> fx
        j0 = <Py_ssize_t> fy
        k0 = <Py_ssize_t> fz
        tx = ijk[i, 0] - fx
        ty = ijk[i, 1] - fy
        tz = ijk[i, 2] - fz
        for di in range(2):
            ii = i0 + di
            if ii < 0 or ii >= D:
                continue
            wx = tx if di else 1.0 - tx
            sx = 1.0 if di else -1.0
            for dj in range(2):
                jj = j0 + dj
                if jj < 0 or jj >= H:
                    continue
                wy = ty if dj else 1.0 - ty
                sy = 1.0 if dj else -1.0
                for dk in range(2):
                    kk = k0 + dk
                    if kk < 0 or kk >= W:
                        continue
                    wz = tz if dk else 1.0 - tz
                    sz = 1.0 if dk else -1.0
                    dval = 0.0
                    for c in range(C):
                        dval = dval + vol[c, ii, jj, kk] * gout[i, c]
                    gp[i, 0] = gp[i, 0] + <real> (dval * sx * wy * wz)
                    gp[i, 1] = gp[i, 1] + <real> (dval * wx * sy * wz)
                    gp[i, 2] = gp[i, 2] + <real> (dval * wx * wy * sz)
    return gp_np


# ---------------------------------------------------------------------------
# nearest neighbors


def nn_bruteforce(const double[:, ::1] q, const double[:, ::1] t):
    cdef Py_ssize_t n = q.shape[0], m = t.shape[0]
    idx_np = np.empty(n, dtype=np.int64)
    d2_np = np.empty(n, dtype=np.float64)
    cdef long long[::1] idx = idx_np
    cdef double[::1] d2 = d2_np
    cdef Py_ssize_t i, j, best_j
    cdef double dx, dy, dz, dd, best
    for i in prange(n, nogil=True, schedule="static"):
        best = 1e300
        best_j = 0
        for j in range(m):
            dx = q[i, 0] - t[j, 0]
            dy = q[i, 1] - t[j, 1]
            dz = q[i, 2] - t[j, 2]
            dd = dx * dx + dy * dy + dz * dz
            if dd < best:
                best = dd
                best_j = j
        idx[i] = best_j
        d2[i] = best
    return idx_np, d2_np


def nn_grid(const double[:, ::1] q, const double[:, ::1] t):
    """Uniform-grid accelerated nearest neighbor (for large target sets)."""
    cdef Py_ssize_t n = q.shape[0], m = t.shape[0]
    t_np = np.asarray(t)
    lo_np = t_np.min(axis=0)
    hi_np = t_np.max(axis=0)
    cdef double[::1] lo = lo_np
    cdef double ext = max(float(np.max(hi_np - lo_np)), 1e-12)
    cdef Py_ssize_t res = <Py_ssize_t> max(1.0, floor((m / 2.0) ** (1.0 / 3.0)))
    if res > 128:
        res = 128
    cdef double cell = ext / res + 1e-300
    # bucket target points by cell (counting sort)
    cell_np = np.minimum(
        ((t_np - lo_np) / cell).astype(np.int64), res - 1)
    np.maximum(cell_np, 0, out=cell_np)
    flat_np = ((cell_np[:, 0] * res + cell_np[:, 1]) * res
               + cell_np[:, 2]).astype(np.int64)
    order_np = np.argsort(flat_np, kind="stable").astype(np.int64)
    sorted_flat = flat_np[order_np]
    starts_np = np.searchsorted(sorted_flat,
                                np.arange(res ** 3 + 1)).astype(np.int64)
    cdef long long[::1] order = order_np
    cdef long long[::1] starts = starts_np
    idx_np = np.empty(n, dtype=np.int64)
    d2_np = np.empty(n, dtype=np.float64)
    cdef long long[::1] idx = idx_np
    cdef double[::1] d2 = d2_np
    cdef Py_ssize_t i, j, r, cx, cy, cz, gx, gy, gz, s, e, p, best_j
    cdef double dx, dy, dz, dd, best
    cdef bint on_shell
    for i in prange(n, nogil=True, schedule="static"):
        cx = <Py_ssize_t> ((q[i, 0] - lo[0]) / cell)
        cy = <Py_ssize_t> ((q[i, 1] - lo[1]) / cell)
        cz = <Py_ssize_t> ((q[i, 2] - lo[2]) / cell)
        if cx < 0: cx = 0
        if cy < 0: cy = 0
        if cz < 0: cz = 0
        if cx >= res: cx = res - 1
        if cy >= res: cy = res - 1
        if cz >= res: cz = res - 1
        best = 1e300
        best_j = 0
        r = 0
        while True:
            for gx in range(cx - r, cx + r + 1):
                if gx < 0 or gx >= res:
                    continue
                for gy in range(cy - r, cy + r + 1):
                    if gy < 0 or gy >= res:
                        continue
                    for gz in range(cz - r, cz + r + 1):
                        if gz < 0 or gz >= res:
                            continue
                        on_shell = (gx == cx - r or gx == cx + r
                                    or gy == cy - r or gy == cy + r
                                    or gz == cz - r or gz == cz + r)
                        if not on_shell:
                            continue
                        s = starts[(gx * res + gy) * res + gz]
                        e = starts[(gx * res + gy) * res + gz + 1]
                        for p in range(s, e):
                            j = order[p]
                            dx = q[i, 0] - t[j, 0]
                            dy = q[i, 1] - t[j, 1]
                            dz = q[i, 2] - t[j, 2]
                            dd = dx * dx + dy * dy + dz * dz
                            if dd < best:
                                best = dd
                                best_j = j
            # points beyond shell r sit at least r*cell away
            if best <= (r * cell) * (r * cell) or r > 2 * res:
                break
            r = r + 1
        idx[i] = best_j
        d2[i] = best
    return idx_np, d2_np


# ---------------------------------------------------------------------------
# exact point-to-triangle distances (Voronoi-region closest point)


cdef inline double _pt_tri_d2(double px, double py, double pz,
                              const double* a, const double* b,
                              const double* c) nogil:
    cdef double abx = b[0] - a[0], aby = b[1] - a[1], abz = b[2] - a[2]
    cdef double acx = c[0] - a[0], acy = c[1] - a[1], acz = c[2] - a[2]
    cdef double apx = px - a[0], apy = py - a[1], apz = pz - a[2]
    cdef double d1 = abx * apx + aby * apy + abz * apz
    cdef double d2 = acx * apx + acy * apy + acz * apz
    cdef double bpx, bpy, bpz, d3, d4, cpx, cpy, cpz, d5, d6
    cdef double va, vb, vc, v, w, denom
    cdef double qx, qy, qz
    if d1 <= 0 and d2 <= 0:
        qx = a[0]; qy = a[1]; qz = a[2]
    else:
        bpx = px - b[0]; bpy = py - b[1]; bpz = pz - b[2]
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        if d3 >= 0 and d4 <= d3:
            qx = b[0]; qy = b[1]; qz = b[2]
        else:
            vc = d1 * d4 - d3 * d2
            cpx = px - c[0]; cpy = py - c[1]; cpz = pz - c[2]
            d5 = abx * cpx + aby * cpy + abz * cpz
            d6 = acx * cpx + acy * cpy + acz * cpz
            if vc <= 0 and d1 >= 0 and d3 <= 0:
                v = d1 / (d1 - d3)
                qx = a[0] + v * abx; qy = a[1] + v * aby; qz = a[2] + v * abz
            elif d6 >= 0 and d5 <= d6:
                qx = c[0]; qy = c[1]; qz = c[2]
            else:
                vb = d5 * d2 - d1 * d6
                if vb <= 0 and d2 >= 0 and d6 <= 0:
                    w = d2 / (d2 - d6)
                    qx = a[0] + w * acx
                    qy = a[1] + w * acy
                    qz = a[2] + w * acz
                else:
                    va = d3 * d6 - d5 * d4
                    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
                        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
                        qx = b[0] + w * (c[0] - b[0])
                        qy = b[1] + w * (c[1] - b[1])
                        qz = b[2] + w * (c[2] - b[2])
                    else:
                        denom = va + vb + vc
                        v = vb / denom
                        w = vc / denom
                        qx = a[0] + v * abx + w * acx
                        qy = a[1] + v * aby + w * acy
                        qz = a[2] + v * abz + w * acz
    qx = px - qx; qy = py - qy; qz = pz - qz
    return qx * qx + qy * qy + qz * qz


def point_triangle_distances(const double[:, ::1] points, const double[:, :, ::1] tri):
    cdef Py_ssize_t n = points.shape[0], f = tri.shape[0]
    out_np = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_np
    # centroid + bounding-radius prune: a triangle whose bounding sphere
    # cannot beat the current best is skipped without the full test
    tri_np = np.asarray(tri)
    cen_np = tri_np.mean(axis=1)
    rad_np = np.sqrt(((tri_np - cen_np[:, None, :]) ** 2)
                     .sum(axis=2).max(axis=1))
    cdef double[:, ::1] cen = np.ascontiguousarray(cen_np)
    cdef double[::1] rad = np.ascontiguousarray(rad_np)
    cdef Py_ssize_t i, j
    cdef double best, dd, dx, dy, dz, dc, lower
    for i in prange(n, nogil=True, schedule="static"):
        best = 1e300
        for j in range(f):
            dx = points[i, 0] - cen[j, 0]
            dy = points[i, 1] - cen[j, 1]
            dz = points[i, 2] - cen[j, 2]
            dc = sqrt(dx * dx + dy * dy + dz * dz)
            lower = dc - rad[j]
            if lower > 0 and lower * lower >= best:
                continue
            dd = _pt_tri_d2(points[i, 0], points[i, 1], points[i, 2],
                            &tri[j, 0, 0], &tri[j, 1, 0], &tri[j, 2, 0])
            if dd < best:
                best = dd
        out[i] = sqrt(best)
    return out_np
