"""Pure-numpy reference implementations of the hot kernels.

These are the portable fallback (and the correctness reference) for the
compiled extension in `_native`. Shapes follow the conventions:

  volumes   [C, D, H, W], spatial axes map to world x, y, z
  conv w    [C_out, C_in, k, k, k], stride 1 or 2, padding k // 2
  tconv w   [C_in, C_out, 2, 2, 2], stride 2
  points    [N, 3] in continuous voxel-index coordinates
"""

from __future__ import annotations

import numpy as np


def conv3d_out_shape(in_shape, k: int, stride: int):
    p = k // 2
    return tuple((s + 2 * p - k) // stride + 1 for s in in_shape)


def conv3d_forward(x, w, b, stride: int):
    cin, D, H, W = x.shape
    cout, cin2, k = w.shape[0], w.shape[1], w.shape[2]
    assert cin == cin2, (cin, cin2)
    p = k // 2
    Do, Ho, Wo = conv3d_out_shape((D, H, W), k, stride)
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    out = np.zeros((cout, Do * Ho * Wo), dtype=x.dtype)
    w2 = w.reshape(cout, cin, k * k * k)
    idx = 0
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                sl = xp[:, dz:dz + (Do - 1) * stride + 1:stride,
                        dy:dy + (Ho - 1) * stride + 1:stride,
                        dx:dx + (Wo - 1) * stride + 1:stride]
                out += w2[:, :, idx] @ np.ascontiguousarray(sl).reshape(cin, -1)
                idx += 1
    out = out.reshape(cout, Do, Ho, Wo)
    if b is not None:
        out += b.reshape(-1, 1, 1, 1)
    return out


def conv3d_backward_input(gout, w, x_shape, stride: int):
    cin, D, H, W = x_shape
    cout, _, k = w.shape[0], w.shape[1], w.shape[2]
    p = k // 2
    Do, Ho, Wo = gout.shape[1:]
    gxp = np.zeros((cin, D + 2 * p, H + 2 * p, W + 2 * p), dtype=gout.dtype)
    g2 = gout.reshape(cout, -1)
    w2 = w.reshape(cout, cin, k * k * k)
    idx = 0
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                view = gxp[:, dz:dz + (Do - 1) * stride + 1:stride,
                           dy:dy + (Ho - 1) * stride + 1:stride,
                           dx:dx + (Wo - 1) * stride + 1:stride]
                view += (w2[:, :, idx].T @ g2).reshape(view.shape)
                idx += 1
    return gxp[:, p:p + D, p:p + H, p:p + W] if p else gxp


def conv3d_backward_weight(gout, x, w_shape, stride: int):
    cout, cin, k = w_shape[0], w_shape[1], w_shape[2]
    p = k // 2
    Do, Ho, Wo = gout.shape[1:]
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    g2 = gout.reshape(cout, -1)
    gw = np.zeros((cout, cin, k * k * k), dtype=gout.dtype)
    idx = 0
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                sl = xp[:, dz:dz + (Do - 1) * stride + 1:stride,
                        dy:dy + (Ho - 1) * stride + 1:stride,
                        dx:dx + (Wo - 1) * stride + 1:stride]
                gw[:, :, idx] = g2 @ np.ascontiguousarray(sl).reshape(cin, -1).T
                idx += 1
    return gw.reshape(w_shape)


def convtrans3d_forward(x, w, b):
    """Transposed conv, kernel 2, stride 2: exact 2x upsampling."""
    cin, D, H, W = x.shape
    cout = w.shape[1]
    out = np.empty((cout, 2 * D, 2 * H, 2 * W), dtype=x.dtype)
    x2 = x.reshape(cin, -1)
    for i in range(2):
        for j in range(2):
            for l in range(2):
                out[:, i::2, j::2, l::2] = (w[:, :, i, j, l].T @ x2).reshape(
                    cout, D, H, W)
    if b is not None:
        out += b.reshape(-1, 1, 1, 1)
    return out


def convtrans3d_backward_input(gout, w):
    cin, cout = w.shape[0], w.shape[1]
    D2, H2, W2 = gout.shape[1:]
    D, H, W = D2 // 2, H2 // 2, W2 // 2
    gx = np.zeros((cin, D * H * W), dtype=gout.dtype)
    for i in range(2):
        for j in range(2):
            for l in range(2):
                gs = np.ascontiguousarray(gout[:, i::2, j::2, l::2])
                gx += w[:, :, i, j, l] @ gs.reshape(cout, -1)
    return gx.reshape(cin, D, H, W)


def convtrans3d_backward_weight(gout, x, w_shape):
    cin, cout = w_shape[0], w_shape[1]
    gw = np.zeros(w_shape, dtype=gout.dtype)
    x2 = x.reshape(cin, -1)
    for i in range(2):
        for j in range(2):
            for l in range(2):
                gs = np.ascontiguousarray(gout[:, i::2, j::2, l::2])
                gw[:, :, i, j, l] = x2 @ gs.reshape(cout, -1).T
    return gw


# ---------------------------------------------------------------------------
# trilinear sampling in voxel-index space; out-of-bounds contributes zero

_CORNERS = [(di, dj, dk) for di in (0, 1) for dj in (0, 1) for dk in (0, 1)]


def _corner_terms(shape, ijk):
    D, H, W = shape
    f = np.floor(ijk)
    base = f.astype(np.int64)
    t = ijk - f
    for di, dj, dk in _CORNERS:
        ii = base[:, 0] + di
        jj = base[:, 1] + dj
        kk = base[:, 2] + dk
        valid = ((ii >= 0) & (ii < D) & (jj >= 0) & (jj < H)
                 & (kk >= 0) & (kk < W))
        wx = t[:, 0] if di else 1.0 - t[:, 0]
        wy = t[:, 1] if dj else 1.0 - t[:, 1]
        wz = t[:, 2] if dk else 1.0 - t[:, 2]
        ii = np.clip(ii, 0, D - 1)
        jj = np.clip(jj, 0, H - 1)
        kk = np.clip(kk, 0, W - 1)
        yield (di, dj, dk), (ii, jj, kk), valid, (wx, wy, wz)


def trilinear_gather(vol, ijk):
    """Sample [C,D,H,W] at continuous index coords [N,3] -> [N,C]."""
    C = vol.shape[0]
    n = len(ijk)
    out = np.zeros((n, C), dtype=vol.dtype)
    for _, (ii, jj, kk), valid, (wx, wy, wz) in _corner_terms(vol.shape[1:], ijk):
        wgt = np.where(valid, wx * wy * wz, 0.0).astype(vol.dtype)
        out += wgt[:, None] * vol[:, ii, jj, kk].T
    return out


def trilinear_scatter(gout, ijk, vol_shape):
    """Adjoint of trilinear_gather w.r.t. the volume: [N,C] -> [C,D,H,W]."""
    C, D, H, W = vol_shape
    gvol = np.zeros((C, D * H * W), dtype=gout.dtype)
    for _, (ii, jj, kk), valid, (wx, wy, wz) in _corner_terms((D, H, W), ijk):
        wgt = np.where(valid, wx * wy * wz, 0.0)
        flat = (ii * H + jj) * W + kk
        contrib = wgt[:, None] * gout
        for c in range(C):
            gvol[c] += np.bincount(flat, weights=contrib[:, c],
                                   minlength=D * H * W)
    return gvol.reshape(vol_shape).astype(gout.dtype)


def trilinear_point_grad(vol, ijk, gout):
    """Gradient of sum(gout * gather(vol, ijk)) w.r.t. the coords: [N,3]."""
    gpts = np.zeros((len(ijk), 3), dtype=np.float64)
    for (di, dj, dk), (ii, jj, kk), valid, (wx, wy, wz) in _corner_terms(
            vol.shape[1:], ijk):
        cv = vol[:, ii, jj, kk].T  # (N, C)
        dval = (cv * gout).sum(axis=1)
        sx, sy, sz = (1.0 if di else -1.0), (1.0 if dj else -1.0), \
                     (1.0 if dk else -1.0)
        dval = np.where(valid, dval, 0.0)
        gpts[:, 0] += dval * sx * wy * wz
        gpts[:, 1] += dval * wx * sy * wz
        gpts[:, 2] += dval * wx * wy * sz
    return gpts.astype(gout.dtype)


# ---------------------------------------------------------------------------
# nearest neighbors


def nn_indices_bruteforce(queries, targets, chunk: int = 1024):
    """Index into `targets` of the nearest target per query + squared dist."""
    q = np.asarray(queries, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    t2 = (t * t).sum(axis=1)
    idx = np.empty(len(q), dtype=np.int64)
    d2 = np.empty(len(q), dtype=np.float64)
    for s in range(0, len(q), chunk):
        qa = q[s:s + chunk]
        dd = (qa * qa).sum(axis=1)[:, None] + t2[None, :] - 2.0 * (qa @ t.T)
        np.maximum(dd, 0.0, out=dd)
        ii = dd.argmin(axis=1)
        idx[s:s + chunk] = ii
        d2[s:s + chunk] = dd[np.arange(len(qa)), ii]
    return idx, d2


def nn_indices_accel(queries, targets):
    """Accelerated nearest neighbor for large sets (scipy cKDTree)."""
    from scipy.spatial import cKDTree

    tree = cKDTree(np.asarray(targets, dtype=np.float64))
    d, idx = tree.query(np.asarray(queries, dtype=np.float64), k=1)
    return idx.astype(np.int64), (d * d).astype(np.float64)


# ---------------------------------------------------------------------------
# exact point-to-triangle distance


def _closest_on_triangles(p, a, b, c):
    """Closest point on each triangle (a,b,c) to each point p, elementwise.

    Vectorized Voronoi-region case analysis; arrays broadcast to a common
    leading shape. Region tests are evaluated in the standard priority
    order (vertex A, B, edge AB, vertex C, edge AC, edge BC, interior).
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    def safe_div(num, den):
        return num / np.where(den == 0, 1.0, den)

    v_ab = np.clip(safe_div(d1, d1 - d3), 0.0, 1.0)
    w_ac = np.clip(safe_div(d2, d2 - d6), 0.0, 1.0)
    w_bc = np.clip(safe_div(d4 - d3, (d4 - d3) + (d5 - d6)), 0.0, 1.0)
    denom = va + vb + vc
    v_in = safe_div(vb, denom)
    w_in = safe_div(vc, denom)

    cond_a = (d1 <= 0) & (d2 <= 0)
    cond_b = (d3 >= 0) & (d4 <= d3)
    cond_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    cond_c = (d6 >= 0) & (d5 <= d6)
    cond_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    cond_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)

    pt_ab = a + v_ab[..., None] * ab
    pt_ac = a + w_ac[..., None] * ac
    pt_bc = b + w_bc[..., None] * (c - b)
    pt_in = a + v_in[..., None] * ab + w_in[..., None] * ac

    cond = np.stack([cond_a, cond_b, cond_ab, cond_c, cond_ac, cond_bc])
    pts = [np.broadcast_to(a, pt_in.shape), np.broadcast_to(b, pt_in.shape),
           pt_ab, np.broadcast_to(c, pt_in.shape), pt_ac, pt_bc]
    out = pt_in.copy()
    chosen = np.zeros(pt_in.shape[:-1], dtype=bool)
    for k in range(6):
        sel = cond[k] & ~chosen
        out[sel] = pts[k][sel]
        chosen |= cond[k]
    return out


def point_triangle_distances(points, tri, chunk: int = 256):
    """Min distance from each point to a triangle soup [F,3,3] -> [N]."""
    p = np.asarray(points, dtype=np.float64)
    tri = np.asarray(tri, dtype=np.float64)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    out = np.empty(len(p), dtype=np.float64)
    for s in range(0, len(p), chunk):
        pa = p[s:s + chunk][:, None, :]  # (n, 1, 3)
        cp = _closest_on_triangles(pa, a[None], b[None], c[None])
        d2 = ((pa - cp) ** 2).sum(-1)
        out[s:s + chunk] = np.sqrt(d2.min(axis=1))
    return out
