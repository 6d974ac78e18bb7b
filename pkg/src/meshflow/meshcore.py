"""Triangle meshes: adjacency, discrete differential geometry, sampling,
smoothing, and the combined white/pial graph used by the deformation network.

All operations are pure functions; meshes are immutable value objects whose
face connectivity never changes under deformation.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)


class MeshError(ValueError):
    pass


def _locked(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class TriangleMesh:
    """Vertices plus fixed triangle connectivity.

    Parameters
    ----------
    vertices : (V, 3) float array, mm coordinates
    faces : (F, 3) int array of vertex indices
    vertex_attrs : optional dict of named per-vertex arrays (length V)

    Vertex and face arrays are copied and locked read-only; derived meshes
    produced by deformation share the identical faces array.
    """

    def __init__(self, vertices, faces, vertex_attrs=None, _shared_faces=None):
        v = np.asarray(vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (V, 3), got {v.shape}")
        if not np.isfinite(v).all():
            raise MeshError("vertices contain non-finite values")
        if _shared_faces is not None:
            f = _shared_faces
        else:
            f = np.asarray(faces, dtype=np.int64)
            if f.ndim != 2 or f.shape[1] != 3:
                raise MeshError(f"faces must be (F, 3), got {f.shape}")
            if f.size and (f.min() < 0 or f.max() >= len(v)):
                raise MeshError("face index out of range")
            if f.size and ((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2])
                           | (f[:, 0] == f[:, 2])).any():
                raise MeshError("degenerate face (repeated vertex index)")
            f = _locked(f)
        self.vertices = _locked(v)
        self.faces = f
        self.vertex_attrs: dict[str, np.ndarray] = {}
        for name, arr in (vertex_attrs or {}).items():
            arr = np.asarray(arr)
            if arr.shape[0] != len(v):
                raise MeshError(f"attr {name!r} length {arr.shape[0]} != V={len(v)}")
            self.vertex_attrs[name] = _locked(arr)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, new_vertices) -> "TriangleMesh":
        """New mesh with moved vertices; the faces array is shared bit-identically."""
        return TriangleMesh(new_vertices, None, vertex_attrs=self.vertex_attrs,
                            _shared_faces=self.faces)

    def with_attrs(self, **attrs) -> "TriangleMesh":
        merged = dict(self.vertex_attrs)
        merged.update(attrs)
        return TriangleMesh(self.vertices, None, vertex_attrs=merged,
                            _shared_faces=self.faces)

    def euler_characteristic(self) -> int:
        e = np.unique(np.sort(_face_edges(self.faces), axis=1), axis=0)
        return self.n_vertices - len(e) + self.n_faces

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        cr = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return 0.5 * np.linalg.norm(cr, axis=1)

    def total_area(self) -> float:
        return float(self.face_areas().sum())

    def content_hash(self) -> int:
        """Order-independent-use hash of geometry, for derived sampling seeds."""
        h = zlib.crc32(np.ascontiguousarray(self.vertices).tobytes())
        h = zlib.crc32(np.ascontiguousarray(self.faces).tobytes(), h)
        return h


def _face_edges(faces: np.ndarray) -> np.ndarray:
    """All 3F directed edges (i, j) following face winding."""
    return np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])


@dataclass
class Adjacency:
    """Vertex neighborhood structure of one or more meshes.

    neighbors are stored in CSR form (indptr/indices); `edges` lists each
    undirected edge once with i < j. `edge_faces` maps interior edges (shared
    by exactly two faces) to their face pair; boundary edge count is kept for
    diagnostics.
    """

    n_vertices: int
    indptr: np.ndarray
    indices: np.ndarray
    edges: np.ndarray
    edge_faces: np.ndarray
    n_boundary_edges: int
    matrix: sparse.csr_matrix = field(repr=False)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbor_list(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def matrix_f32(self) -> sparse.csr_matrix:
        """Cached float32 view of the adjacency matrix (GNN hot path)."""
        m = getattr(self, "_matrix_f32", None)
        if m is None:
            m = self.matrix.astype(np.float32)
            self._matrix_f32 = m
        return m


def build_adjacency(mesh: TriangleMesh) -> Adjacency:
    """Neighbor lists and unique edge list; rejects non-manifold edges."""
    f = mesh.faces
    n = mesh.n_vertices
    de = np.sort(_face_edges(f), axis=1)
    face_of_edge = np.tile(np.arange(len(f)), 3)
    order = np.lexsort((de[:, 1], de[:, 0]))
    de = de[order]
    face_of_edge = face_of_edge[order]
    is_new = np.ones(len(de), dtype=bool)
    is_new[1:] = (de[1:] != de[:-1]).any(axis=1)
    starts = np.flatnonzero(is_new)
    counts = np.diff(np.append(starts, len(de)))
    if (counts > 2).any():
        bad = de[starts[counts > 2][0]]
        raise MeshError(f"non-manifold edge {tuple(bad)} shared by "
                        f"{counts.max()} faces")
    uniq = de[starts]
    interior = counts == 2
    ef = np.stack([face_of_edge[starts[interior]],
                   face_of_edge[starts[interior] + 1]], axis=1)
    if ef.size == 0:
        ef = ef.reshape(0, 2)
    return _adjacency_from_edges(n, uniq, ef, int((counts == 1).sum()))


def _adjacency_from_edges(n, edges, edge_faces, n_boundary) -> Adjacency:
    both = np.concatenate([edges, edges[:, ::-1]])
    m = sparse.csr_matrix(
        (np.ones(len(both)), (both[:, 0], both[:, 1])), shape=(n, n))
    m.sum_duplicates()
    m.data[:] = 1.0
    return Adjacency(n_vertices=n, indptr=m.indptr, indices=m.indices,
                     edges=edges, edge_faces=edge_faces,
                     n_boundary_edges=n_boundary, matrix=m)


def add_virtual_edges(white: TriangleMesh, pial: TriangleMesh) -> Adjacency:
    """Combined graph over both meshes with one extra edge per vertex pair.

    Vertex i of the white mesh is joined to vertex i of the pial mesh; these
    edges exist only in the returned graph, never in the meshes' faces.
    """
    if white.n_vertices != pial.n_vertices:
        raise MeshError(f"vertex count mismatch: {white.n_vertices} vs "
                        f"{pial.n_vertices}")
    n = white.n_vertices
    aw = build_adjacency(white)
    ap = build_adjacency(pial)
    cross = np.stack([np.arange(n), np.arange(n) + n], axis=1)
    edges = np.concatenate([aw.edges, ap.edges + n, cross])
    # face pairs are per-mesh; kept for completeness, offset into a shared
    # face index space (white faces first)
    ef = np.concatenate([aw.edge_faces, ap.edge_faces + white.n_faces,
                         np.full((n, 2), -1, dtype=np.int64)])
    return _adjacency_from_edges(2 * n, edges, ef,
                                 aw.n_boundary_edges + ap.n_boundary_edges)


def stack_adjacency(parts: list[Adjacency]) -> Adjacency:
    """Block-diagonal union of disjoint graphs (e.g. two hemisphere pairs).

    edge_faces is not meaningful on the combined graph and is left empty;
    the result is for graph convolutions only.
    """
    offsets = np.cumsum([0] + [p.n_vertices for p in parts])
    edges = np.concatenate([p.edges + offsets[i] for i, p in enumerate(parts)])
    ef = np.zeros((0, 2), dtype=np.int64)
    n_bnd = sum(p.n_boundary_edges for p in parts)
    return _adjacency_from_edges(int(offsets[-1]), edges, ef, n_bnd)


def vertex_and_face_normals(mesh: TriangleMesh):
    """Unit face normals (winding order) and area-weighted unit vertex normals."""
    v = mesh.vertices
    f = mesh.faces
    cr = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norms = np.linalg.norm(cr, axis=1)
    bad = np.nonzero(norms <= 1e-300)[0]
    if bad.size:
        raise MeshError(f"zero-area face at index {bad[0]}")
    face_n = cr / norms[:, None]
    vert_n = np.zeros_like(v)
    for k in range(3):
        np.add.at(vert_n, f[:, k], cr)  # cross product length = 2*area
    vn_norm = np.linalg.norm(vert_n, axis=1)
    vn_norm[vn_norm == 0] = 1.0
    return face_n, vert_n / vn_norm[:, None]


@dataclass
class CurvatureField:
    """Per-vertex curvature magnitude (1/mm) and loss weights in [1, k_max]."""

    raw_mean_curvature: np.ndarray
    weights: np.ndarray | None = None
    n_degenerate: int = 0


def discrete_mean_curvature(mesh: TriangleMesh) -> CurvatureField:
    """Magnitude of the cotangent mean-curvature normal (returns 2H).

    Uses the cotangent weights with the mixed-area cell of the standard
    discrete operator; on a sphere of radius r the value converges to 2/r.
    Vertices with numerically degenerate (non-positive) mixed area get
    curvature 0 and are counted in the returned diagnostics.
    """
    v = mesh.vertices
    f = mesh.faces
    n = mesh.n_vertices
    p0, p1, p2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    def cot(a, b):
        # cotangent of angle between edge vectors a, b
        cross = np.cross(a, b)
        denom = np.linalg.norm(cross, axis=1)
        denom = np.where(denom < 1e-300, 1e-300, denom)
        return (a * b).sum(axis=1) / denom

    cot0 = cot(p1 - p0, p2 - p0)
    cot1 = cot(p2 - p1, p0 - p1)
    cot2 = cot(p0 - p2, p1 - p2)

    lap = np.zeros((n, 3))
    # edge opposite vertex k carries cot(angle at k); accumulate both endpoints
    for (i, j, cotk) in ((1, 2, cot0), (2, 0, cot1), (0, 1, cot2)):
        w = cotk[:, None]
        diff = v[f[:, i]] - v[f[:, j]]
        np.add.at(lap, f[:, i], -w * diff)
        np.add.at(lap, f[:, j], w * diff)

    area = mesh.face_areas()
    amix = np.zeros(n)
    obtuse0 = cot0 < 0
    obtuse1 = cot1 < 0
    obtuse2 = cot2 < 0
    any_obtuse = obtuse0 | obtuse1 | obtuse2
    # Voronoi-safe mixed area: Voronoi cell for non-obtuse faces, else
    # half the face area at the obtuse corner and a quarter elsewhere.
    l0 = ((p1 - p2) ** 2).sum(axis=1)   # squared edge opposite vertex 0
    l1 = ((p2 - p0) ** 2).sum(axis=1)
    l2 = ((p0 - p1) ** 2).sum(axis=1)
    vor = np.stack([l1 * cot1 + l2 * cot2,
                    l2 * cot2 + l0 * cot0,
                    l0 * cot0 + l1 * cot1], axis=1) / 8.0
    frac_obtuse = np.stack([
        np.where(obtuse0, 0.5, 0.25),
        np.where(obtuse1, 0.5, 0.25),
        np.where(obtuse2, 0.5, 0.25)], axis=1) * area[:, None]
    cell = np.where(any_obtuse[:, None], frac_obtuse, vor)
    for k in range(3):
        np.add.at(amix, f[:, k], cell[:, k])

    degenerate = amix <= 1e-300
    safe = np.where(degenerate, 1.0, amix)
    raw = np.linalg.norm(lap, axis=1) / (2.0 * safe)
    raw[degenerate] = 0.0
    n_deg = int(degenerate.sum())
    if n_deg:
        logger.warning("curvature: %d vertices with degenerate mixed area "
                       "clamped to 0", n_deg)
    return CurvatureField(raw_mean_curvature=raw, n_degenerate=n_deg)


def curvature_weights(raw: np.ndarray, k_max: float = 5.0,
                      scale: float = 1.0) -> np.ndarray:
    """Map nonnegative curvature to Chamfer weights: min(1 + scale*raw, k_max)."""
    if k_max < 1.0:
        raise ValueError(f"k_max must be >= 1, got {k_max}")
    raw = np.asarray(raw, dtype=np.float64)
    if (raw < 0).any():
        raise ValueError("raw curvature must be nonnegative")
    return np.minimum(1.0 + scale * raw, k_max)


@dataclass
class PointSample:
    """Differentiable surface samples: barycentric points on chosen faces."""

    points: np.ndarray
    source_face: np.ndarray
    barycentric: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def sample_points(mesh: TriangleMesh, n: int, seed: int) -> PointSample:
    """Sample n points uniformly by area; deterministic for a fixed seed.

    Each point is the fixed barycentric combination of its face's vertices,
    so positions are linear in the vertex coordinates.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    faces, bary = sample_barycentric(mesh, n, seed)
    pts = points_from_barycentric(mesh.vertices, mesh.faces, faces, bary)
    return PointSample(points=pts, source_face=faces, barycentric=bary)


def sample_barycentric(mesh: TriangleMesh, n: int, seed: int):
    """The non-differentiable part of sampling: face choice + weights."""
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise MeshError("total surface area is zero")
    rng = np.random.Generator(np.random.PCG64(seed))
    faces = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    w = rng.random(n)
    su = np.sqrt(u)
    bary = np.stack([1.0 - su, su * (1.0 - w), su * w], axis=1)
    return faces, bary


def points_from_barycentric(vertices, faces, face_idx, bary):
    tri = vertices[faces[face_idx]]          # (n, 3 corners, 3)
    return (bary[:, :, None] * tri).sum(axis=1)


def laplacian_smooth(mesh: TriangleMesh, steps: int,
                     step_factor: float = 0.5) -> TriangleMesh:
    """Uniform-weight Laplacian smoothing: v += factor * (nbr mean - v)."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps == 0:
        return mesh.with_vertices(mesh.vertices)
    adj = build_adjacency(mesh)
    inv_deg = 1.0 / np.maximum(adj.degrees, 1)
    v = mesh.vertices.copy()
    for _ in range(steps):
        nbr_mean = (adj.matrix @ v) * inv_deg[:, None]
        v = v + step_factor * (nbr_mean - v)
    return mesh.with_vertices(v)


# ---------------------------------------------------------------------------
# reference shapes

_ICO_T = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array([
    [-1, _ICO_T, 0], [1, _ICO_T, 0], [-1, -_ICO_T, 0], [1, -_ICO_T, 0],
    [0, -1, _ICO_T], [0, 1, _ICO_T], [0, -1, -_ICO_T], [0, 1, -_ICO_T],
    [_ICO_T, 0, -1], [_ICO_T, 0, 1], [-_ICO_T, 0, -1], [-_ICO_T, 0, 1],
], dtype=np.float64)
_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=np.int64)


def icosahedron(radius: float = 1.0) -> TriangleMesh:
    v = _ICO_VERTS / np.linalg.norm(_ICO_VERTS[0])
    return TriangleMesh(v * radius, _ICO_FACES)


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriangleMesh:
    """Subdivided icosahedron projected to the sphere (outward winding)."""
    v = _ICO_VERTS / np.linalg.norm(_ICO_VERTS[0])
    f = _ICO_FACES
    for _ in range(subdivisions):
        v, f = _subdivide(v, f)
        v = v / np.linalg.norm(v, axis=1)[:, None]
    return TriangleMesh(v * radius, f)


def _subdivide(v, f):
    edges = np.unique(np.sort(_face_edges(f), axis=1), axis=0)
    mid_index = {(int(i), int(j)): len(v) + k
                 for k, (i, j) in enumerate(edges)}
    mids = 0.5 * (v[edges[:, 0]] + v[edges[:, 1]])
    new_v = np.concatenate([v, mids])

    def mid(a, b):
        return mid_index[(a, b) if a < b else (b, a)]

    new_f = []
    for a, b, c in f:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        new_f += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
    return new_v, np.array(new_f, dtype=np.int64)
