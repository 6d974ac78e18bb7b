"""The deformation network: graph-residual blocks, the initial embedding
block, and stacked graph-NODE blocks integrated by forward Euler.

All surfaces deform jointly through one shared velocity field; white and
pial meshes are linked by virtual edges in the processed graph only.
Output GraphConv heads start at exactly zero, so a fresh model is the
identity deformation.
"""

from __future__ import annotations

import gc
import weakref
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .featnet import SegmentationOutput, UNet3d, UNetConfig
from .layers import BatchNorm, GraphConv
from .meshcore import (Adjacency, TriangleMesh, add_virtual_edges,
                       build_adjacency, stack_adjacency)
from .voxgrid import FeatureVolume


class NumericsError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    """Architecture manifest for the full deformation model."""

    unet_channels: tuple = (8, 16, 32, 16, 8)
    n_classes: int = 3
    n_seg_outputs: int = 2
    n_node_blocks: int = 2      # S
    euler_steps: int = 5        # I per block; step size 1/I
    hidden: int = 64
    pad_shape: tuple | None = None   # zero-pad inputs to this spatial shape

    def __post_init__(self):
        if self.n_node_blocks < 1 or self.euler_steps < 1:
            raise ValueError("need at least one NODE block and one step")

    def unet_config(self) -> UNetConfig:
        return UNetConfig(channels=tuple(self.unet_channels),
                          n_classes=self.n_classes,
                          n_seg_outputs=self.n_seg_outputs)

    @property
    def hyper_channels(self) -> int:
        c = self.unet_config()
        return (1 + sum(c.encoder_channels) + c.bottleneck_channels
                + sum(c.decoder_channels) + self.n_classes)

    @property
    def velocity_in_channels(self) -> int:
        return self.hyper_channels + 3 + self.hidden

    def to_manifest(self) -> dict:
        return {"unet_channels": list(self.unet_channels),
                "n_classes": self.n_classes,
                "n_seg_outputs": self.n_seg_outputs,
                "n_node_blocks": self.n_node_blocks,
                "euler_steps": self.euler_steps,
                "hidden": self.hidden,
                "pad_shape": list(self.pad_shape) if self.pad_shape
                             else None}

    @classmethod
    def from_manifest(cls, m: dict) -> "ModelConfig":
        pad = m.get("pad_shape")
        return cls(unet_channels=tuple(m["unet_channels"]),
                   n_classes=m["n_classes"],
                   n_seg_outputs=m["n_seg_outputs"],
                   n_node_blocks=m["n_node_blocks"],
                   euler_steps=m["euler_steps"],
                   hidden=m["hidden"],
                   pad_shape=tuple(pad) if pad else None)


class GraphResidualBlock:
    """Three GraphConv/batch-norm/ReLU units with an identity skip added
    before the final ReLU; a width-matching GraphConv sits on the skip when
    the input and output widths differ."""

    def __init__(self, d_in, d_out, rng, dtype=np.float32):
        self.gc1 = GraphConv(d_in, d_out, rng, dtype=dtype)
        self.bn1 = BatchNorm(d_out, "graph", dtype=dtype)
        self.gc2 = GraphConv(d_out, d_out, rng, dtype=dtype)
        self.bn2 = BatchNorm(d_out, "graph", dtype=dtype)
        self.gc3 = GraphConv(d_out, d_out, rng, dtype=dtype)
        self.bn3 = BatchNorm(d_out, "graph", dtype=dtype)
        self.gc_skip = GraphConv(d_in, d_out, rng, dtype=dtype) \
            if d_in != d_out else None

    def __call__(self, x, adj, training):
        h = ad.relu(self.bn1(self.gc1(x, adj), training))
        h = ad.relu(self.bn2(self.gc2(h, adj), training))
        h = self.bn3(self.gc3(h, adj), training)
        s = x if self.gc_skip is None else self.gc_skip(x, adj)
        return ad.relu(h + s)

    def named_params(self, prefix):
        for i, gc in enumerate((self.gc1, self.gc2, self.gc3), 1):
            yield from gc.named_params(f"{prefix}.gc{i}")
        for i, bn in enumerate((self.bn1, self.bn2, self.bn3), 1):
            yield from bn.named_params(f"{prefix}.bn{i}")
        if self.gc_skip is not None:
            yield from self.gc_skip.named_params(f"{prefix}.gc_skip")

    def named_buffers(self, prefix):
        for i, bn in enumerate((self.bn1, self.bn2, self.bn3), 1):
            yield from bn.named_buffers(f"{prefix}.bn{i}")


class NodeBlock:
    """One graph-NODE velocity field: three graph-residual blocks and a
    zero-initialized output head mapping hidden features to 3D velocity."""

    def __init__(self, d_in, hidden, rng, dtype=np.float32):
        self.trunk = [GraphResidualBlock(d_in, hidden, rng, dtype),
                      GraphResidualBlock(hidden, hidden, rng, dtype),
                      GraphResidualBlock(hidden, hidden, rng, dtype)]
        self.head = GraphConv(hidden, 3, init="zero", dtype=dtype)

    def velocity(self, taps, verts, deep, adj, training=False):
        return node_velocity(self, taps, verts, deep, adj, training)

    def named_params(self, prefix):
        for i, rb in enumerate(self.trunk, 1):
            yield from rb.named_params(f"{prefix}.rb{i}")
        yield from self.head.named_params(f"{prefix}.head")

    def named_buffers(self, prefix):
        for i, rb in enumerate(self.trunk, 1):
            yield from rb.named_buffers(f"{prefix}.rb{i}")


class EmbeddingBlock:
    """Initial deep features from template coordinates plus a surface id."""

    def __init__(self, hidden, rng, dtype=np.float32):
        self.trunk = [GraphResidualBlock(4, hidden, rng, dtype),
                      GraphResidualBlock(hidden, hidden, rng, dtype),
                      GraphResidualBlock(hidden, hidden, rng, dtype)]

    def __call__(self, x, adj, training):
        h = x
        for rb in self.trunk:
            h = rb(h, adj, training)
        return h

    def named_params(self, prefix):
        for i, rb in enumerate(self.trunk, 1):
            yield from rb.named_params(f"{prefix}.rb{i}")

    def named_buffers(self, prefix):
        for i, rb in enumerate(self.trunk, 1):
            yield from rb.named_buffers(f"{prefix}.rb{i}")


class DeformationModel:
    """Feature UNet + initial embedding + S graph-NODE blocks."""

    def __init__(self, config: ModelConfig, rng):
        self.config = config
        self.unet = UNet3d(config.unet_config(), rng)
        self.embed = EmbeddingBlock(config.hidden, rng)
        self.blocks = [NodeBlock(config.velocity_in_channels, config.hidden,
                                 rng)
                       for _ in range(config.n_node_blocks)]

    # -- parameter access ----------------------------------------------------

    def named_params(self):
        yield from self.unet.named_params("unet")
        yield from self.embed.named_params("embed")
        for s, blk in enumerate(self.blocks):
            yield from blk.named_params(f"node{s}")

    def named_buffers(self):
        yield from self.unet.named_buffers("unet")
        yield from self.embed.named_buffers("embed")
        for s, blk in enumerate(self.blocks):
            yield from blk.named_buffers(f"node{s}")

    def feature_params(self):
        """Voxel-network parameter group (own learning rate)."""
        return [t for _, t in self.unet.named_params("unet")]

    def graph_params(self):
        """Deformation-network parameter group (own learning rate)."""
        out = [t for _, t in self.embed.named_params("embed")]
        for s, blk in enumerate(self.blocks):
            out += [t for _, t in blk.named_params(f"node{s}")]
        return out

    # -- checkpointing --------------------------------------------------------

    def save(self, path):
        arrays = {name: t.data for name, t in self.named_params()}
        for name, buf in self.named_buffers():
            arrays[name] = buf
        ad.save_checkpoint(path, arrays,
                           extra={"arch": self.config.to_manifest()})

    @classmethod
    def load(cls, path) -> "DeformationModel":
        arrays, extra = ad.load_checkpoint(path)
        if "arch" not in extra:
            raise ValueError(f"{path}: missing architecture manifest")
        cfg = ModelConfig.from_manifest(extra["arch"])
        model = cls(cfg, np.random.default_rng(0))
        model.load_arrays(arrays)
        return model

    def load_arrays(self, arrays: dict):
        buffers = {}
        for name, buf in self.named_buffers():
            buffers[name] = buf
        for name, t in self.named_params():
            if name not in arrays:
                raise ValueError(f"checkpoint missing parameter {name}")
            if tuple(arrays[name].shape) != t.data.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint "
                                 f"{arrays[name].shape} vs model "
                                 f"{t.data.shape}")
            t.data = arrays[name].astype(t.data.dtype)
            t.grad = None
        for name, buf in buffers.items():
            if name in arrays:
                buf[...] = arrays[name].astype(buf.dtype).reshape(buf.shape)


# ---------------------------------------------------------------------------
# template context and integration


@dataclass
class TemplateContext:
    """Precomputed graph structure for a fixed template.

    Surfaces are stacked in pair order (white0, pial0, white1, pial1, ...);
    the processed graph carries the virtual edges, the per-surface topology
    is kept for losses and output reconstruction.
    """

    pairs: list
    meshes: list
    adjacency: Adjacency
    surface_adjacency: list
    verts64: np.ndarray
    verts32: np.ndarray
    surface_id: np.ndarray
    slices: list

    @classmethod
    def build(cls, pairs: list[tuple[TriangleMesh, TriangleMesh]]):
        meshes = [m for pair in pairs for m in pair]
        adj = stack_adjacency([add_virtual_edges(w, p) for w, p in pairs])
        surf_adj = [build_adjacency(m) for m in meshes]
        # +0.0 normalizes any negative zeros so a zero velocity field is a
        # bit-exact identity
        verts64 = np.concatenate([m.vertices for m in meshes]) + 0.0
        verts32 = verts64.astype(np.float32)
        sid = np.concatenate([np.full(m.n_vertices, i % 2, dtype=np.float32)
                              for i, m in enumerate(meshes)])
        offsets = np.cumsum([0] + [m.n_vertices for m in meshes])
        slices = [slice(int(a), int(b))
                  for a, b in zip(offsets[:-1], offsets[1:])]
        return cls(pairs=pairs, meshes=meshes, adjacency=adj,
                   surface_adjacency=surf_adj, verts64=verts64,
                   verts32=verts32, surface_id=sid, slices=slices)

    @property
    def n_surfaces(self) -> int:
        return len(self.meshes)


class IntegrationTrace:
    """Counts velocity evaluations and tracks live vertex-state buffers.

    State buffers are held by weak reference, so `alive_states()` measures
    what the integrator actually retains: constant in the step count at
    inference, linear in it during training (the recorded graph keeps every
    intermediate state reachable)."""

    def __init__(self):
        self._refs = []
        self.velocity_evals = 0

    def register_state(self, arr: np.ndarray):
        self._refs.append(weakref.ref(arr))

    def alive_states(self) -> int:
        gc.collect()
        return sum(1 for r in self._refs if r() is not None)

    @property
    def registered_states(self) -> int:
        return len(self._refs)


@dataclass
class SurfaceSet:
    """Deformed surfaces: final meshes, per-NODE snapshots, segmentation."""

    surfaces: list
    snapshots: list                      # [S][C] TriangleMesh
    seg: SegmentationOutput | None = None


@dataclass
class DeformResult:
    surface_set: SurfaceSet
    seg: SegmentationOutput
    snapshot_tensors: list               # [S] stacked vertex Tensors
    taps: list
    trace: IntegrationTrace


def initial_embedding(embed: EmbeddingBlock, verts, surface_id, adj,
                      training: bool = False) -> Tensor:
    """Width-hidden deep features from rows [x, y, z, id], id in {0, 1}."""
    sid = np.asarray(surface_id)
    if not np.isin(sid, (0, 1)).all():
        raise ValueError("surface id must be 0 (white) or 1 (pial)")
    verts = ad.as_tensor(verts)
    x = ad.concat([verts, Tensor(sid.reshape(-1, 1).astype(verts.dtype))],
                  axis=1)
    return embed(x, adj, training)


def node_velocity(block: NodeBlock, taps, verts, deep, adj,
                  training: bool = False):
    """One velocity evaluation: returns (velocity, trunk deep features).

    Input rows are [hypercolumns(verts); verts; deep]; hypercolumns are
    re-sampled at the current vertex locations."""
    verts = ad.as_tensor(verts)
    hyper = ad.concat([ad.trilinear_sample(t.tensor, verts, t.spacing,
                                           t.origin) for t in taps], axis=1)
    x = ad.concat([hyper, verts, deep], axis=1)
    h = x
    for rb in block.trunk:
        h = rb(h, adj, training)
    vel = block.head(h, adj)
    return vel, h


def euler_integrate(block: NodeBlock, taps, verts, deep, adj, n_steps: int,
                    training: bool = False,
                    trace: IntegrationTrace | None = None):
    """Forward Euler with step size 1/n_steps; exactly n_steps evaluations.

    Returns the trajectory endpoint and the trunk features of the final
    evaluation (handed to the next NODE block)."""
    if n_steps < 1:
        raise ValueError("need at least one integration step")
    h = 1.0 / n_steps
    trunk = deep
    for k in range(n_steps):
        vel, trunk = block.velocity(taps, verts, deep, adj, training)
        if not np.isfinite(vel.data).all():
            raise NumericsError(f"non-finite velocity at integration step {k}")
        verts = verts + h * vel
        if trace is not None:
            trace.velocity_evals += 1
            trace.register_state(verts.data)
    return verts, trunk


def deform(model: DeformationModel, vol: FeatureVolume,
           template: TemplateContext | list, training: bool = False,
           trace: IntegrationTrace | None = None) -> DeformResult:
    """Run the full pipeline: features once, then S NODE blocks jointly over
    all surfaces with shared parameters; faces arrays are preserved."""
    ctx = template if isinstance(template, TemplateContext) \
        else TemplateContext.build(template)
    taps, seg = model.unet.forward(vol, training)
    verts = Tensor(ctx.verts32.copy())
    if trace is not None:
        trace.register_state(verts.data)
    deep = initial_embedding(model.embed, verts, ctx.surface_id,
                             ctx.adjacency, training)
    snapshot_tensors = []
    for block in model.blocks:
        verts, deep = euler_integrate(block, taps, verts, deep,
                                      ctx.adjacency, model.config.euler_steps,
                                      training, trace)
        snapshot_tensors.append(verts)
    snapshots = []
    for vt in snapshot_tensors:
        data64 = vt.data.astype(np.float64)
        snapshots.append([ctx.meshes[c].with_vertices(data64[ctx.slices[c]])
                          for c in range(ctx.n_surfaces)])
    surface_set = SurfaceSet(surfaces=snapshots[-1], snapshots=snapshots,
                             seg=seg)
    return DeformResult(surface_set=surface_set, seg=seg,
                        snapshot_tensors=snapshot_tensors, taps=taps,
                        trace=trace or IntegrationTrace())
