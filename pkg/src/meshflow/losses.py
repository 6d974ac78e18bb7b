"""Training objective: curvature-weighted Chamfer, edge regularity, normal
consistency, and their assembly over all NODE snapshots and surfaces.

Nearest-neighbor indices inside the Chamfer terms are treated as constants
during backward (the min is piecewise smooth); point samples are fixed
linear combinations of vertex coordinates, so gradients flow to vertices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import Tensor
from .meshcore import (Adjacency, TriangleMesh, sample_barycentric)

logger = logging.getLogger(__name__)


@dataclass
class LossWeights:
    """Mesh-loss weights; defaults follow the grid-searched training setup."""

    lambda_edge: float = 1.0
    lambda_nc: float = 0.0001
    k_max: float = 5.0
    n_sample: int = 5000        # per-surface sample count (50,000 full scale)


def chamfer_cw(pred_points, gt_points, gt_weights) -> Tensor:
    """Curvature-weighted symmetric Chamfer distance (squared distances).

    Both directional terms carry the weight of the involved ground-truth
    point: the gt->pred term weights each gt point by its own kappa, the
    pred->gt term weights each predicted point by the kappa of its nearest
    ground-truth point.
    """
    pred = ad.as_tensor(pred_points)
    gt = np.asarray(gt_points, dtype=np.float64)
    w = np.asarray(gt_weights, dtype=np.float64)
    if len(gt) == 0 or pred.shape[0] == 0:
        raise ValueError("chamfer_cw: empty point sample")
    if w.shape[0] != len(gt):
        raise ValueError(f"chamfer_cw: {w.shape[0]} weights for "
                         f"{len(gt)} gt points")
    pd = pred.data.astype(np.float64)
    idx_gt_to_pred, _ = _kernels.nn_indices(gt, pd)
    idx_pred_to_gt, _ = _kernels.nn_indices(pd, gt)

    dtype = pred.dtype
    # gt -> pred: kappa(u) * ||u - nearest pred||^2
    nearest_pred = ad.gather_rows(pred, idx_gt_to_pred)
    diff1 = ad.sub(Tensor(gt.astype(dtype)), nearest_pred)
    term1 = ad.tmean(ad.mul(ad.squared_norm(diff1, axis=1),
                            Tensor(w.astype(dtype))))
    # pred -> gt: kappa(nearest gt) * ||v - nearest gt||^2
    diff2 = ad.sub(pred, Tensor(gt[idx_pred_to_gt].astype(dtype)))
    term2 = ad.tmean(ad.mul(ad.squared_norm(diff2, axis=1),
                            Tensor(w[idx_pred_to_gt].astype(dtype))))
    return term1 + term2


def edge_loss(vertices, edges: np.ndarray) -> Tensor:
    """Mean squared edge length over the unique edge list."""
    v = ad.as_tensor(vertices)
    vi = ad.gather_rows(v, edges[:, 0])
    vj = ad.gather_rows(v, edges[:, 1])
    return ad.tmean(ad.squared_norm(ad.sub(vi, vj), axis=1))


def _cross(a, b) -> Tensor:
    ax, ay, az = (ad.slice_axis(a, 1, i, i + 1) for i in range(3))
    bx, by, bz = (ad.slice_axis(b, 1, i, i + 1) for i in range(3))
    return ad.concat([ad.sub(ad.mul(ay, bz), ad.mul(az, by)),
                      ad.sub(ad.mul(az, bx), ad.mul(ax, bz)),
                      ad.sub(ad.mul(ax, by), ad.mul(ay, bx))], axis=1)


def normal_consistency(vertices, faces: np.ndarray,
                       adjacency: Adjacency) -> Tensor:
    """Mean of 1 - cos(angle between normals) over interior edges."""
    if adjacency.n_boundary_edges:
        logger.warning("normal consistency on a boundary mesh: %d boundary "
                       "edges skipped", adjacency.n_boundary_edges)
    v = ad.as_tensor(vertices)
    v0 = ad.gather_rows(v, faces[:, 0])
    v1 = ad.gather_rows(v, faces[:, 1])
    v2 = ad.gather_rows(v, faces[:, 2])
    n = _cross(ad.sub(v1, v0), ad.sub(v2, v0))
    ef = adjacency.edge_faces
    n0 = ad.gather_rows(n, ef[:, 0])
    n1 = ad.gather_rows(n, ef[:, 1])
    dot = ad.tsum(ad.mul(n0, n1), axis=1)
    # 1e-20 guards exactly degenerate faces without biasing the cosine
    norms = ad.mul(ad.sqrt(ad.add(ad.squared_norm(n0, axis=1), 1e-20)),
                   ad.sqrt(ad.add(ad.squared_norm(n1, axis=1), 1e-20)))
    cos = ad.div(dot, norms)
    return ad.tmean(ad.sub(1.0, cos))


def sample_points_diff(vertices, mesh_now: TriangleMesh, n: int,
                       seed: int) -> Tensor:
    """Differentiable area-weighted surface samples: the face choice and
    barycentric weights come from the current geometry and are constants;
    each point is a fixed linear combination of vertex coordinates."""
    v = ad.as_tensor(vertices)
    face_idx, bary = sample_barycentric(mesh_now, n, seed)
    f = mesh_now.faces
    pts = None
    for k in range(3):
        corner = ad.gather_rows(v, f[face_idx, k])
        term = ad.mul(corner, Tensor(bary[:, k:k + 1].astype(v.dtype)))
        pts = term if pts is None else ad.add(pts, term)
    return pts


@dataclass
class SurfaceTarget:
    """Ground truth for one surface class: mesh plus per-vertex kappa."""

    mesh: TriangleMesh
    curvature_weights: np.ndarray


def gt_sample_with_weights(target: SurfaceTarget, n: int, seed: int):
    """Sample gt points and barycentrically interpolate their weights."""
    face_idx, bary = sample_barycentric(target.mesh, n, seed)
    f = target.mesh.faces
    pts = np.einsum("nk,nkd->nd", bary,
                    target.mesh.vertices[f[face_idx]])
    w = (bary * target.curvature_weights[f[face_idx]]).sum(axis=1)
    return pts, w


def mesh_loss(snapshot_tensors, ctx, targets: list[SurfaceTarget],
              weights: LossWeights, seed: int) -> Tensor:
    """Sum over snapshots s and surfaces c of
    CwC + lambda_edge * edge + lambda_nc * normal consistency.

    Fresh, seed-derived point samples per (s, c) term.
    """
    if len(targets) != ctx.n_surfaces:
        raise ValueError(f"{len(targets)} targets for {ctx.n_surfaces} "
                         f"surfaces")
    total = None
    for s, verts in enumerate(snapshot_tensors):
        for c in range(ctx.n_surfaces):
            sub_seed_pred, sub_seed_gt = [
                int(x.generate_state(1)[0])
                for x in np.random.SeedSequence((seed, s, c)).spawn(2)]
            vt = ad.slice_axis(verts, 0, ctx.slices[c].start,
                               ctx.slices[c].stop)
            mesh_now = ctx.meshes[c].with_vertices(
                vt.data.astype(np.float64))
            pred_pts = sample_points_diff(vt, mesh_now, weights.n_sample,
                                          sub_seed_pred)
            gt_pts, gt_w = gt_sample_with_weights(targets[c],
                                                  weights.n_sample,
                                                  sub_seed_gt)
            term = chamfer_cw(pred_pts, gt_pts, gt_w)
            term = term + weights.lambda_edge * edge_loss(
                vt, ctx.surface_adjacency[c].edges)
            term = term + weights.lambda_nc * normal_consistency(
                vt, ctx.meshes[c].faces, ctx.surface_adjacency[c])
            total = term if total is None else total + term
    return total


def total_loss(vox: Tensor, mesh: Tensor) -> Tensor:
    """Plain unweighted sum of the voxel and mesh objectives."""
    return vox + mesh
