"""3D feature volumes: intensity preprocessing, trilinear sampling at
continuous world coordinates, hypercolumn assembly, and the RVOL file format.

World convention: the center of voxel (i, j, k) sits at
origin + (i, j, k) * spacing, with grid axes 1..3 of the [C, D, H, W] data
mapping to world x, y, z.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels


@dataclass
class FeatureVolume:
    """Dense [C, D, H, W] feature grid with voxel size and world origin."""

    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be [C,D,H,W], got "
                             f"{self.data.shape}")
        if min(self.data.shape[1:]) < 2:
            raise ValueError(f"spatial dims must be >= 2, got "
                             f"{self.data.shape[1:]}")
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if (self.spacing <= 0).any():
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.origin) / self.spacing

    def index_to_world(self, ijk: np.ndarray) -> np.ndarray:
        return np.asarray(ijk, dtype=np.float64) * self.spacing + self.origin

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of all voxel centers, shape [D,H,W,3]."""
        d, h, w = self.data.shape[1:]
        ii, jj, kk = np.meshgrid(np.arange(d), np.arange(h), np.arange(w),
                                 indexing="ij")
        idx = np.stack([ii, jj, kk], axis=-1).astype(np.float64)
        return idx * self.spacing + self.origin


def centered_volume(data, spacing=1.0) -> FeatureVolume:
    """Volume whose voxel grid is centered on the world origin."""
    data = np.asarray(data)
    if data.ndim == 3:
        data = data[None]
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    shape = np.array(data.shape[1:], dtype=np.float64)
    origin = -(shape - 1) / 2.0 * spacing
    return FeatureVolume(data, spacing, origin)


def minmax_normalize(vol: FeatureVolume) -> FeatureVolume:
    """Rescale a single-channel intensity volume into [0, 1]."""
    if vol.n_channels != 1:
        raise ValueError(f"expected single-channel volume, got "
                         f"{vol.n_channels} channels")
    lo = float(vol.data.min())
    hi = float(vol.data.max())
    if hi == lo:
        warnings.warn("constant volume: min-max normalization yields zeros")
        data = np.zeros_like(vol.data)
    else:
        data = (vol.data - lo) / (hi - lo)
    return FeatureVolume(data, vol.spacing, vol.origin)


def pad_to(vol: FeatureVolume, target_shape) -> FeatureVolume:
    """Zero-pad to the target spatial shape, content centered, world fixed."""
    cur = vol.data.shape[1:]
    target = tuple(int(t) for t in target_shape)
    if any(t < c for t, c in zip(target, cur)):
        raise ValueError(f"target shape {target} smaller than current {cur}")
    before = [(t - c) // 2 for t, c in zip(target, cur)]
    after = [t - c - b for t, c, b in zip(target, cur, before)]
    data = np.pad(vol.data, [(0, 0)] + list(zip(before, after)))
    origin = vol.origin - np.array(before) * vol.spacing
    return FeatureVolume(data, vol.spacing, origin)


def trilinear_sample(vol: FeatureVolume, points) -> np.ndarray:
    """Sample all channels at world points [N,3] -> [N,C]; outside is 0."""
    ijk = vol.world_to_index(points)
    return _kernels.trilinear_gather(vol.data, ijk)


def gather_hypercolumns(taps: list[FeatureVolume], points) -> np.ndarray:
    """Concatenate per-point samples of every tap, in tap order -> [N, sumC].

    Taps may live at different resolutions; each is queried through its own
    spacing/origin so all share one world frame.
    """
    if not taps:
        raise ValueError("empty tap list")
    return np.concatenate([trilinear_sample(t, points) for t in taps], axis=1)


# ---------------------------------------------------------------------------
# RVOL format: one UTF-8 JSON header line, then raw little-endian f32,
# C-order. Round-trips bit-exactly.


def write_rvol(path, vol: FeatureVolume) -> None:
    data = np.ascontiguousarray(vol.data, dtype="<f4")
    header = {"shape": list(data.shape),
              "spacing": [float(s) for s in vol.spacing],
              "origin": [float(o) for o in vol.origin],
              "dtype": "f32"}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(data.tobytes())


def read_rvol(path) -> FeatureVolume:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("dtype") != "f32":
            raise ValueError(f"unsupported RVOL dtype {header.get('dtype')}")
        shape = tuple(header["shape"])
        data = np.frombuffer(fh.read(), dtype="<f4",
                             count=int(np.prod(shape))).reshape(shape)
    return FeatureVolume(data.copy(), header["spacing"], header["origin"])
