"""Synthetic stand-in for an MRI corpus: nested perturbed-sphere surface
pairs, rasterized 3-class label volumes, noisy intensity volumes, and a
population template with octant parcel labels.

Surfaces are radial graphs over a subdivided icosphere, so the inner mesh is
star-shaped, closed, genus 0, and strictly inside the outer mesh whenever
the amplitude budget keeps the radial gap positive.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import meshio
from .meshcore import TriangleMesh, icosphere, laplacian_smooth
from .voxgrid import FeatureVolume, centered_volume, minmax_normalize, \
    read_rvol, write_rvol

# class ids in the label volume
BACKGROUND, GRAY, WHITE = 0, 1, 2


def angular_basis(dirs: np.ndarray) -> np.ndarray:
    """Low-order angular harmonics, each normalized to max 1 on the sphere.

    Polynomials in the unit direction up to degree 4; smooth, fold-like
    bumps when mixed with random amplitudes.
    """
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    terms = [
        (x, 1.0), (y, 1.0), (z, 1.0),
        (x * y, 0.5), (y * z, 0.5), (z * x, 0.5),
        (x * x - y * y, 1.0), (3 * z * z - 1, 2.0),
        (x * y * z, 1.0 / (3 * np.sqrt(3.0))),
        (z * (x * x - y * y), 2.0 / (3 * np.sqrt(3.0))),
        (x * (x * x - 3 * y * y), 1.0),
        (x ** 4 - 6 * x * x * y * y + y ** 4, 1.0),
    ]
    return np.stack([t / m for t, m in terms], axis=1)


N_BASIS = 12


@dataclass
class SceneSpec:
    """Recipe for one synthetic subject."""

    seed: int
    r_inner: float = 16.0
    r_outer: float = 20.0
    amplitude: float = 0.10       # sum of |shared coefficients|
    outer_extra: float = 0.02     # sum of |outer-only coefficients|
    subdivisions: int = 4
    grid_shape: tuple = (64, 64, 64)
    spacing: float = 1.0
    noise_sd: float = 0.05
    intensities: tuple = (0.2, 0.5, 0.8)   # background, gray, white means

    def min_radial_gap_bound(self) -> float:
        return ((self.r_outer - self.r_inner) * (1.0 - self.amplitude)
                - self.r_outer * self.outer_extra)


@dataclass
class Scene:
    spec: SceneSpec
    inner: TriangleMesh
    outer: TriangleMesh
    labels: np.ndarray            # [D,H,W] int class ids
    intensity: FeatureVolume


class GapError(ValueError):
    pass


def _draw_coefficients(rng, total: float) -> np.ndarray:
    raw = rng.uniform(-1.0, 1.0, N_BASIS)
    s = np.abs(raw).sum()
    return raw * (total / s) if s > 0 else raw


def gen_scene(spec: SceneSpec, min_gap: float = 1.0,
              noise_seed: int | None = None) -> Scene:
    """Generate one scene; rejects specs whose radial gap can dip below
    min_gap. `noise_seed` replays the same anatomy under different
    intensity noise (test-retest scans)."""
    bound = spec.min_radial_gap_bound()
    if bound < min_gap:
        raise GapError(
            f"amplitude budget violates the surface gap: worst-case gap "
            f"{bound:.3f} mm < {min_gap} mm (amplitude={spec.amplitude}, "
            f"outer_extra={spec.outer_extra})")
    ss = np.random.SeedSequence(spec.seed)
    rng_shape, rng_noise = [np.random.Generator(np.random.PCG64(c))
                            for c in ss.spawn(2)]
    if noise_seed is not None:
        rng_noise = np.random.Generator(np.random.PCG64(noise_seed))
    a = _draw_coefficients(rng_shape, spec.amplitude)
    b = _draw_coefficients(rng_shape, spec.outer_extra)

    base = icosphere(spec.subdivisions, radius=1.0)
    dirs = base.vertices / np.linalg.norm(base.vertices, axis=1)[:, None]
    basis = angular_basis(dirs)
    p = basis @ a
    q = basis @ b
    inner = base.with_vertices(dirs * (spec.r_inner * (1.0 + p))[:, None])
    outer = base.with_vertices(dirs * (spec.r_outer * (1.0 + p + q))[:, None])

    vol0 = centered_volume(np.zeros(spec.grid_shape, dtype=np.float32),
                           spec.spacing)
    centers = vol0.voxel_centers().reshape(-1, 3)
    rho = np.linalg.norm(centers, axis=1)
    safe_rho = np.where(rho == 0, 1.0, rho)
    vdirs = centers / safe_rho[:, None]
    vbasis = angular_basis(vdirs)
    pv = vbasis @ a
    qv = vbasis @ b
    r_in = spec.r_inner * (1.0 + pv)
    r_out = spec.r_outer * (1.0 + pv + qv)
    labels = np.full(len(centers), BACKGROUND, dtype=np.int64)
    labels[rho <= r_out] = GRAY
    labels[rho <= r_in] = WHITE
    labels = labels.reshape(spec.grid_shape)

    means = np.asarray(spec.intensities, dtype=np.float64)
    intensity = means[labels] + rng_noise.normal(0.0, spec.noise_sd,
                                                 spec.grid_shape)
    vol = minmax_normalize(
        centered_volume(intensity.astype(np.float32), spec.spacing))
    return Scene(spec=spec, inner=inner, outer=outer, labels=labels,
                 intensity=vol)


# ---------------------------------------------------------------------------
# template and parcels


def octant_parcels(subdivisions: int) -> np.ndarray:
    """Synthetic parcel labels: angular octant of each base-sphere vertex.

    Shared by every mesh generated at the same subdivision level, so the
    label of output vertex i is the ground-truth label of gt vertex i."""
    dirs = icosphere(subdivisions, radius=1.0).vertices
    return ((dirs[:, 0] > 0).astype(np.int64) * 4
            + (dirs[:, 1] > 0).astype(np.int64) * 2
            + (dirs[:, 2] > 0).astype(np.int64))


def make_template(scenes: list[Scene], smooth_steps: int = 50):
    """Population template: vertex-wise mean of the training shapes,
    Laplacian-smoothed; octant parcels attached; coordinates rounded to
    f32 so the deformation identity holds bit-exactly."""
    if not scenes:
        raise ValueError("need at least one training scene")
    inner_mean = np.mean([s.inner.vertices for s in scenes], axis=0)
    outer_mean = np.mean([s.outer.vertices for s in scenes], axis=0)
    base = scenes[0].inner
    parcels = octant_parcels(scenes[0].spec.subdivisions)

    def finish(verts):
        m = laplacian_smooth(base.with_vertices(verts), smooth_steps)
        v32 = m.vertices.astype(np.float32).astype(np.float64)
        return base.with_vertices(v32).with_attrs(parcel=parcels)

    return finish(inner_mean), finish(outer_mean)


def split_dataset(n: int, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Deterministic disjoint train/val/test index lists covering range(n)."""
    ratios = tuple(ratios)
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    sizes = [int(np.floor(r * n)) for r in ratios]
    rem = n - sum(sizes)
    for i in range(rem):
        sizes[i % len(sizes)] += 1
    if any(s < 1 for s in sizes):
        raise ValueError(f"n={n} too small for nonempty splits {ratios}")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(n)
    out = []
    at = 0
    for s in sizes:
        out.append(sorted(int(i) for i in order[at:at + s]))
        at += s
    return out


# ---------------------------------------------------------------------------
# on-disk corpus layout


def scene_seed(root_seed: int, index: int) -> int:
    return int(np.random.SeedSequence((root_seed, index)).generate_state(1)[0])


def save_scene(scene_dir, scene: Scene) -> None:
    d = Path(scene_dir)
    d.mkdir(parents=True, exist_ok=True)
    meshio.write_obj(d / "inner.obj", scene.inner)
    meshio.write_obj(d / "outer.obj", scene.outer)
    write_rvol(d / "labels.rvol",
               centered_volume(scene.labels.astype(np.float32),
                               scene.spec.spacing))
    write_rvol(d / "intensity.rvol", scene.intensity)
    meta = asdict(scene.spec)
    meta["class_ids"] = {"background": BACKGROUND, "gray": GRAY,
                         "white": WHITE}
    with open(d / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class LoadedScene:
    inner: TriangleMesh
    outer: TriangleMesh
    labels: np.ndarray
    intensity: FeatureVolume
    meta: dict = field(default_factory=dict)


def load_scene(scene_dir) -> LoadedScene:
    d = Path(scene_dir)
    with open(d / "meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    labels_vol = read_rvol(d / "labels.rvol")
    return LoadedScene(inner=meshio.read_obj(d / "inner.obj"),
                       outer=meshio.read_obj(d / "outer.obj"),
                       labels=labels_vol.data[0].astype(np.int64),
                       intensity=read_rvol(d / "intensity.rvol"),
                       meta=meta)


def generate_dataset(out_dir, n_train: int, n_val: int, n_test: int,
                     grid: int = 64, seed: int = 0,
                     spec_overrides: dict | None = None) -> dict:
    """Write a full corpus: scene directories, template, splits manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = n_train + n_val + n_test
    ids = list(range(n))
    splits = {"train": ids[:n_train],
              "val": ids[n_train:n_train + n_val],
              "test": ids[n_train + n_val:]}
    overrides = dict(spec_overrides or {})
    train_scenes = []
    for i in ids:
        spec = SceneSpec(seed=scene_seed(seed, i),
                         grid_shape=(grid, grid, grid), **overrides)
        scene = gen_scene(spec)
        save_scene(out / f"scene_{i:04d}", scene)
        if i in splits["train"]:
            train_scenes.append(scene)
    inner_t, outer_t = make_template(train_scenes)
    tdir = out / "template"
    tdir.mkdir(exist_ok=True)
    meshio.write_obj(tdir / "inner.obj", inner_t)
    meshio.write_obj(tdir / "outer.obj", outer_t)
    meshio.write_vertex_csv(tdir / "parcels.csv",
                            inner_t.vertex_attrs["parcel"],
                            header="vertex_id,parcel")
    with open(tdir / "meta.json", "w", encoding="utf-8") as fh:
        json.dump({"smooth_steps": 50, "n_population": len(train_scenes),
                   "subdivisions": train_scenes[0].spec.subdivisions},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "splits.json", "w", encoding="utf-8") as fh:
        json.dump(splits, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return splits


def load_template(data_dir):
    tdir = Path(data_dir) / "template"
    parcels = meshio.read_vertex_csv(tdir / "parcels.csv", dtype=np.int64)
    inner = meshio.read_obj(tdir / "inner.obj").with_attrs(parcel=parcels)
    outer = meshio.read_obj(tdir / "outer.obj").with_attrs(parcel=parcels)
    return inner, outer


def load_splits(data_dir) -> dict:
    with open(Path(data_dir) / "splits.json", encoding="utf-8") as fh:
        return json.load(fh)
