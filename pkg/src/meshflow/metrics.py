"""Evaluation metrics: sampled surface distances (ASSD, HD90), mesh
intersection counting (SIF within a mesh, IF across meshes), nearest-neighbor
parcellation Dice, cortical thickness, and test-retest RMSD consistency.

Point-to-surface distances are exact point-to-triangle distances; sampling
seeds are derived per mesh from the geometry so symmetric metrics are
argument-order independent.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .meshcore import TriangleMesh, sample_points


def _mesh_seed(mesh: TriangleMesh, base_seed: int) -> int:
    ss = np.random.SeedSequence((int(base_seed), mesh.content_hash()))
    return int(ss.generate_state(1)[0])


def _directional_distances(src: TriangleMesh, dst: TriangleMesh,
                           n: int, base_seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError("need at least one sample point")
    if src.total_area() <= 0 or dst.total_area() <= 0:
        raise ValueError("degenerate surface (zero area)")
    pts = sample_points(src, n, _mesh_seed(src, base_seed)).points
    tri = dst.vertices[dst.faces]
    return _kernels.point_triangle_distances(pts, tri)


def assd(m1: TriangleMesh, m2: TriangleMesh, n: int = 100_000,
         seed: int = 0) -> float:
    """Average symmetric surface distance from n samples per surface (mm)."""
    d12 = _directional_distances(m1, m2, n, seed)
    d21 = _directional_distances(m2, m1, n, seed)
    return float((d12.sum() + d21.sum()) / (len(d12) + len(d21)))


def _nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    v = np.sort(values)
    k = int(np.ceil(q * len(v)))
    return float(v[max(k - 1, 0)])


def hd90(m1: TriangleMesh, m2: TriangleMesh, n: int = 100_000,
         seed: int = 0) -> float:
    """Max of the two directional 90-percentile distances (nearest rank)."""
    d12 = _directional_distances(m1, m2, n, seed)
    d21 = _directional_distances(m2, m1, n, seed)
    return max(_nearest_rank_percentile(d12, 0.9),
               _nearest_rank_percentile(d21, 0.9))


def surface_distances(m1: TriangleMesh, m2: TriangleMesh, n: int = 100_000,
                      seed: int = 0):
    """(ASSD, HD90) from one pair of directional distance computations."""
    d12 = _directional_distances(m1, m2, n, seed)
    d21 = _directional_distances(m2, m1, n, seed)
    a = float((d12.sum() + d21.sum()) / (len(d12) + len(d21)))
    h = max(_nearest_rank_percentile(d12, 0.9),
            _nearest_rank_percentile(d21, 0.9))
    return a, h


# ---------------------------------------------------------------------------
# triangle-triangle intersection

EPS = 1e-9


def _project_axis(n: np.ndarray) -> np.ndarray:
    return np.abs(n).argmax(axis=-1)


def _coplanar_overlap(t1: np.ndarray, t2: np.ndarray,
                      normal: np.ndarray) -> np.ndarray:
    """2D overlap test for coplanar triangle pairs [P,3,3]."""
    axis = _project_axis(normal)
    keep = np.stack([np.delete(np.arange(3), a) for a in axis])  # (P, 2)
    p_idx = np.arange(len(t1))[:, None, None]
    u = t1[p_idx, np.arange(3)[None, :, None], keep[:, None, :]]
    v = t2[p_idx, np.arange(3)[None, :, None], keep[:, None, :]]

    def seg_cross(a0, a1, b0, b1):
        def orient(p, q, r):
            return ((q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1])
                    - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0]))
        d1 = orient(b0, b1, a0)
        d2 = orient(b0, b1, a1)
        d3 = orient(a0, a1, b0)
        d4 = orient(a0, a1, b1)
        proper = (((d1 > EPS) & (d2 < -EPS)) | ((d1 < -EPS) & (d2 > EPS))) \
            & (((d3 > EPS) & (d4 < -EPS)) | ((d3 < -EPS) & (d4 > EPS)))

        def on_seg(p, q, r, d):
            return (np.abs(d) <= EPS) \
                & (np.minimum(p[..., 0], q[..., 0]) - EPS <= r[..., 0]) \
                & (r[..., 0] <= np.maximum(p[..., 0], q[..., 0]) + EPS) \
                & (np.minimum(p[..., 1], q[..., 1]) - EPS <= r[..., 1]) \
                & (r[..., 1] <= np.maximum(p[..., 1], q[..., 1]) + EPS)

        return (proper | on_seg(b0, b1, a0, d1) | on_seg(b0, b1, a1, d2)
                | on_seg(a0, a1, b0, d3) | on_seg(a0, a1, b1, d4))

    hit = np.zeros(len(t1), dtype=bool)
    for i in range(3):
        for j in range(3):
            hit |= seg_cross(u[:, i], u[:, (i + 1) % 3],
                             v[:, j], v[:, (j + 1) % 3])

    def inside(tri2d, pts):
        def orient(p, q, r):
            return ((q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1])
                    - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0]))
        d0 = orient(tri2d[:, 0], tri2d[:, 1], pts)
        d1 = orient(tri2d[:, 1], tri2d[:, 2], pts)
        d2 = orient(tri2d[:, 2], tri2d[:, 0], pts)
        has_neg = (d0 < -EPS) | (d1 < -EPS) | (d2 < -EPS)
        has_pos = (d0 > EPS) | (d1 > EPS) | (d2 > EPS)
        return ~(has_neg & has_pos)

    hit |= inside(v, u[:, 0])
    hit |= inside(u, v[:, 0])
    return hit


def _interval_on_line(pr: np.ndarray, dv: np.ndarray) -> np.ndarray:
    """Intersection interval of a triangle with the other triangle's plane.

    pr: projections of the 3 vertices onto the intersection line [P,3];
    dv: signed distances to the other plane (eps-snapped) [P,3].
    Chooses the 'odd' vertex on its own side, following the classic
    sign-case analysis; returns sorted interval endpoints [P,2].
    """
    d0, d1, d2 = dv[:, 0], dv[:, 1], dv[:, 2]
    odd = np.full(len(dv), -1, dtype=np.int64)
    odd[(d1 * d2 > 0) | (d0 != 0)] = 0
    odd[(d0 * d2 > 0)] = 1
    odd[(d0 * d1 > 0)] = 2
    rem = odd == -1
    odd[rem & (d1 != 0)] = 1
    odd[rem & (d1 == 0) & (d2 != 0)] = 2
    # odd == -1 only for fully coplanar rows, handled elsewhere
    odd_safe = np.where(odd < 0, 0, odd)
    ia = (odd_safe + 1) % 3
    ib = (odd_safe + 2) % 3
    rows = np.arange(len(dv))
    d_odd = dv[rows, odd_safe]
    pr_odd = pr[rows, odd_safe]

    def endpoint(i):
        di = dv[rows, i]
        pri = pr[rows, i]
        denom = di - d_odd
        t = np.where(denom != 0, di / np.where(denom == 0, 1.0, denom), 0.0)
        return pri + t * (pr_odd - pri)

    e = np.stack([endpoint(ia), endpoint(ib)], axis=1)
    return np.sort(e, axis=1)


def tri_tri_intersections(t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
    """Vectorized triangle-pair intersection predicate [P,3,3]x2 -> [P] bool.

    Interval test on the plane-intersection line, with an epsilon-snapped
    coplanar branch; touching contacts count as intersections.
    """
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    n2 = np.cross(t2[:, 1] - t2[:, 0], t2[:, 2] - t2[:, 0])
    d2 = -(n2 * t2[:, 0]).sum(axis=1)
    dp = np.einsum("pd,pvd->pv", n2, t1) + d2[:, None]
    dp[np.abs(dp) <= EPS] = 0.0
    sep1 = (dp > 0).all(axis=1) | (dp < 0).all(axis=1)

    n1 = np.cross(t1[:, 1] - t1[:, 0], t1[:, 2] - t1[:, 0])
    d1 = -(n1 * t1[:, 0]).sum(axis=1)
    dq = np.einsum("pd,pvd->pv", n1, t2) + d1[:, None]
    dq[np.abs(dq) <= EPS] = 0.0
    sep2 = (dq > 0).all(axis=1) | (dq < 0).all(axis=1)

    out = np.zeros(len(t1), dtype=bool)
    active = ~(sep1 | sep2)
    coplanar = active & (dp == 0).all(axis=1)
    cross_case = active & ~coplanar
    if cross_case.any():
        idx = np.nonzero(cross_case)[0]
        direction = np.cross(n1[idx], n2[idx])
        axis = _project_axis(direction)
        pr1 = np.take_along_axis(t1[idx], axis[:, None, None], axis=2)[:, :, 0]
        pr2 = np.take_along_axis(t2[idx], axis[:, None, None], axis=2)[:, :, 0]
        i1 = _interval_on_line(pr1, dp[idx])
        i2 = _interval_on_line(pr2, dq[idx])
        overlap = (np.maximum(i1[:, 0], i2[:, 0])
                   <= np.minimum(i1[:, 1], i2[:, 1]) + EPS)
        out[idx] = overlap
    if coplanar.any():
        idx = np.nonzero(coplanar)[0]
        out[idx] = _coplanar_overlap(t1[idx], t2[idx], n2[idx])
    return out


def _face_grid_pairs(tri_a: np.ndarray, tri_b: np.ndarray | None):
    """Uniform-grid broad phase: candidate AABB-overlapping face pairs.

    With tri_b None, generates unordered within-set pairs (i < j), else
    cross-set pairs (i from a, j from b)."""
    self_mode = tri_b is None
    if self_mode:
        tri_b = tri_a
    lo_a, hi_a = tri_a.min(axis=1), tri_a.max(axis=1)
    lo_b, hi_b = tri_b.min(axis=1), tri_b.max(axis=1)
    lo = np.minimum(lo_a.min(axis=0), lo_b.min(axis=0))
    ext_a = hi_a - lo_a
    cell = float(np.median(ext_a.max(axis=1))) * 2.0
    if cell <= 0:
        cell = 1.0

    def cells_of(lo_f, hi_f):
        c0 = np.floor((lo_f - lo) / cell).astype(np.int64)
        c1 = np.floor((hi_f - lo) / cell).astype(np.int64)
        return c0, c1

    buckets: dict[tuple, list] = {}
    c0, c1 = cells_of(lo_b, hi_b)
    for j in range(len(tri_b)):
        for x in range(c0[j, 0], c1[j, 0] + 1):
            for y in range(c0[j, 1], c1[j, 1] + 1):
                for z in range(c0[j, 2], c1[j, 2] + 1):
                    buckets.setdefault((x, y, z), []).append(j)

    pairs = set()
    a0, a1 = cells_of(lo_a, hi_a)
    for i in range(len(tri_a)):
        seen = set()
        for x in range(a0[i, 0], a1[i, 0] + 1):
            for y in range(a0[i, 1], a1[i, 1] + 1):
                for z in range(a0[i, 2], a1[i, 2] + 1):
                    for j in buckets.get((x, y, z), ()):
                        if j in seen:
                            continue
                        seen.add(j)
                        if self_mode:
                            if j <= i:
                                continue
                            pairs.add((i, j))
                        else:
                            pairs.add((i, j))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    arr = np.array(sorted(pairs), dtype=np.int64)
    # prune non-overlapping AABBs
    keep = ((lo_a[arr[:, 0]] <= hi_b[arr[:, 1]] + EPS)
            & (lo_b[arr[:, 1]] <= hi_a[arr[:, 0]] + EPS)).all(axis=1)
    return arr[keep]


def count_self_intersections(mesh: TriangleMesh):
    """Fraction of faces in >= 1 intersection with a non-adjacent face.

    Face pairs sharing any vertex are excluded; returns (fraction, face set).
    """
    tri = mesh.vertices[mesh.faces]
    pairs = _face_grid_pairs(tri, None)
    if len(pairs):
        fa = mesh.faces[pairs[:, 0]]
        fb = mesh.faces[pairs[:, 1]]
        shares = (fa[:, :, None] == fb[:, None, :]).any(axis=(1, 2))
        pairs = pairs[~shares]
    if len(pairs) == 0:
        return 0.0, np.zeros(0, dtype=np.int64)
    hits = tri_tri_intersections(tri[pairs[:, 0]], tri[pairs[:, 1]])
    bad = np.unique(pairs[hits])
    return len(bad) / mesh.n_faces, bad


def count_surface_intersections(m1: TriangleMesh, m2: TriangleMesh):
    """Intersecting face pairs across two meshes (no adjacency exclusion).

    Returns (pair count, fraction of faces of either mesh involved)."""
    tri1 = m1.vertices[m1.faces]
    tri2 = m2.vertices[m2.faces]
    pairs = _face_grid_pairs(tri1, tri2)
    if len(pairs) == 0:
        return 0, 0.0
    hits = tri_tri_intersections(tri1[pairs[:, 0]], tri2[pairs[:, 1]])
    n_pairs = int(hits.sum())
    faces_involved = (len(np.unique(pairs[hits, 0]))
                      + len(np.unique(pairs[hits, 1])))
    return n_pairs, faces_involved / (m1.n_faces + m2.n_faces)


# ---------------------------------------------------------------------------
# parcellation and thickness


def central_surface(wm: TriangleMesh, pial: TriangleMesh) -> TriangleMesh:
    """Per-vertex midpoint surface of a corresponding WM/pial pair."""
    if wm.n_vertices != pial.n_vertices:
        raise ValueError("central surface needs corresponding meshes")
    mid = 0.5 * (wm.vertices + pial.vertices)
    return wm.with_vertices(mid)


def parcellation_dice(pred_central: TriangleMesh, gt_central: TriangleMesh,
                      label_attr: str = "parcel"):
    """Bidirectional nearest-neighbor Dice between labeled central surfaces.

    Every vertex of each surface is matched to the nearest vertex of the
    other; agreement counts from both directions are pooled per label.
    Returns (per-label Dice dict, size-weighted mean); weights are the
    pooled ground-truth-side counts.
    """
    lp = np.asarray(pred_central.vertex_attrs[label_attr])
    lg = np.asarray(gt_central.vertex_attrs[label_attr])
    if set(np.unique(lp)) - set(np.unique(lg)):
        raise ValueError("prediction uses labels absent from ground truth")
    idx_p2g, _ = _kernels.nn_indices(pred_central.vertices,
                                     gt_central.vertices)
    idx_g2p, _ = _kernels.nn_indices(gt_central.vertices,
                                     pred_central.vertices)
    pred_side = np.concatenate([lp, lp[idx_g2p]])
    gt_side = np.concatenate([lg[idx_p2g], lg])
    labels = np.unique(np.concatenate([lp, lg]))
    dice = {}
    weights = {}
    for lab in labels:
        a = int((pred_side == lab).sum())
        b = int((gt_side == lab).sum())
        m = int(((pred_side == lab) & (gt_side == lab)).sum())
        dice[int(lab)] = 2.0 * m / (a + b) if (a + b) else 1.0
        weights[int(lab)] = b
    total_w = sum(weights.values())
    weighted = sum(dice[k] * weights[k] for k in dice) / total_w \
        if total_w else 0.0
    return dice, float(weighted)


def cortical_thickness(wm: TriangleMesh, pial: TriangleMesh) -> np.ndarray:
    """Exact distance of each WM vertex to the nearest pial surface point."""
    tri = pial.vertices[pial.faces]
    return _kernels.point_triangle_distances(wm.vertices, tri)


def rmsd_consistency(values: list) -> np.ndarray:
    """Per-element RMSD of repeated measurements from their mean.

    Accepts a list of [V, 3] vertex arrays (or meshes) or [V] scalar
    arrays; a single repetition yields zeros by definition.
    """
    arrays = [v.vertices if isinstance(v, TriangleMesh) else np.asarray(v)
              for v in values]
    if len(arrays) < 1:
        raise ValueError("need at least one measurement")
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent shapes {shapes}")
    stack = np.stack(arrays)
    dev = stack - stack.mean(axis=0, keepdims=True)
    sq = dev ** 2
    if sq.ndim == 3:
        sq = sq.sum(axis=-1)
    return np.sqrt(sq.mean(axis=0))


# ---------------------------------------------------------------------------
# report assembly


@dataclass
class EvalReport:
    """Per-subject evaluation results, serializable to JSON and CSV rows."""

    subject: str
    per_surface: dict = field(default_factory=dict)
    cross: dict = field(default_factory=dict)

    def add_surface(self, name: str, **values):
        self.per_surface.setdefault(name, {}).update(values)

    def to_dict(self) -> dict:
        return {"subject": self.subject, "surfaces": self.per_surface,
                "cross": self.cross}

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def csv_rows(self) -> list[dict]:
        rows = []
        for surf, vals in sorted(self.per_surface.items()):
            row = {"subject": self.subject, "surface": surf}
            row.update({k: vals[k] for k in sorted(vals)})
            row.update({f"cross_{k}": v
                        for k, v in sorted(self.cross.items())})
            rows.append(row)
        return rows


def write_report_csv(path, reports: list[EvalReport]):
    rows = [r for rep in reports for r in rep.csv_rows()]
    if not rows:
        return
    fields = sorted({k for r in rows for k in r},
                    key=lambda k: (k not in ("subject", "surface"), k))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
