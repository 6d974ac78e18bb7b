"""Parameter-holding layers built on the autodiff primitives.

Shared between the voxel feature network and the graph deformation network.
Every layer exposes named_params() for checkpointing and optimizer grouping;
batch-norm layers additionally expose named_buffers() (running statistics).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Conv3d:
    """k^3 convolution, padding k//2; weights uniform in +-1/sqrt(fan_in)."""

    def __init__(self, cin, cout, rng, k=3, stride=1, dtype=np.float32):
        bound = 1.0 / np.sqrt(cin * k ** 3)
        self.stride = stride
        self.w = Tensor(rng.uniform(-bound, bound,
                                    (cout, cin, k, k, k)).astype(dtype),
                        requires_grad=True)
        self.b = Tensor(rng.uniform(-bound, bound, cout).astype(dtype),
                        requires_grad=True)

    def __call__(self, x):
        return ad.conv3d(x, self.w, self.b, stride=self.stride)

    def named_params(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class ConvTranspose3d:
    """2x upsampling transposed convolution (kernel 2, stride 2)."""

    def __init__(self, cin, cout, rng, dtype=np.float32):
        bound = 1.0 / np.sqrt(cin)
        self.w = Tensor(rng.uniform(-bound, bound,
                                    (cin, cout, 2, 2, 2)).astype(dtype),
                        requires_grad=True)
        self.b = Tensor(rng.uniform(-bound, bound, cout).astype(dtype),
                        requires_grad=True)

    def __call__(self, x):
        return ad.conv_transpose3d(x, self.w, self.b)

    def named_params(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class BatchNorm:
    """Single-sample batch norm: stats over spatial axes ('vol' kind,
    [C,D,H,W] inputs) or over the vertex axis ('graph' kind, [N,C] inputs).
    """

    def __init__(self, channels, kind="vol", dtype=np.float32):
        if kind == "vol":
            shape = (channels, 1, 1, 1)
            self.axes = (1, 2, 3)
        elif kind == "graph":
            shape = (1, channels)
            self.axes = (0,)
        else:
            raise ValueError(f"unknown batch-norm kind {kind!r}")
        self.gamma = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
        self.running = {"mean": np.zeros(shape, dtype=np.float64),
                        "var": np.ones(shape, dtype=np.float64)}

    def __call__(self, x, training: bool):
        return ad.batch_norm(x, self.gamma, self.beta, self.axes,
                             self.running, training)

    def named_params(self, prefix):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix):
        yield f"{prefix}.running_mean", self.running["mean"]
        yield f"{prefix}.running_var", self.running["var"]

    def load_buffers(self, mean, var):
        self.running["mean"] = np.asarray(mean, dtype=np.float64).reshape(
            self.running["mean"].shape)
        self.running["var"] = np.asarray(var, dtype=np.float64).reshape(
            self.running["var"].shape)


class GraphConv:
    """Neighborhood-normalized graph convolution.

    out_i = (W0 f_i + W1 sum_{j in N(i)} f_j + b) / (1 + |N(i)|), with the
    normalization applied to the whole bracket including the bias. Weights
    are [d_out, d_in]; `init` selects zero (output heads) or normal(0, sd).
    """

    def __init__(self, d_in, d_out, rng=None, init="normal", sd=0.01,
                 dtype=np.float32):
        self.d_in, self.d_out = d_in, d_out
        if init == "zero":
            w0 = np.zeros((d_out, d_in))
            w1 = np.zeros((d_out, d_in))
        elif init == "normal":
            w0 = rng.normal(0.0, sd, (d_out, d_in))
            w1 = rng.normal(0.0, sd, (d_out, d_in))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.W0 = Tensor(w0.astype(dtype), requires_grad=True)
        self.W1 = Tensor(w1.astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, feats, adj):
        return graph_conv(self, feats, adj)

    def named_params(self, prefix):
        yield f"{prefix}.W0", self.W0
        yield f"{prefix}.W1", self.W1
        yield f"{prefix}.b", self.b


def graph_conv(p: GraphConv, feats, adj) -> Tensor:
    """Apply one GraphConv over per-vertex feature rows [N, d_in].

    Fused primitive: one sparse neighbor sum plus two GEMMs forward; the
    backward rule reuses the cached neighbor sum (the adjacency matrix is
    symmetric, so its transpose is itself)."""
    x = ad.as_tensor(feats)
    if x.shape[0] != adj.n_vertices:
        raise ad.ShapeError(f"graph_conv: {x.shape[0]} feature rows for "
                            f"{adj.n_vertices} vertices")
    if x.shape[1] != p.d_in:
        raise ad.ShapeError(f"graph_conv: feature width {x.shape[1]} != "
                            f"d_in {p.d_in}")
    mat = adj.matrix_f32() if x.dtype == np.float32 else adj.matrix
    inv_norm = (1.0 / (1.0 + adj.degrees)).astype(x.dtype)[:, None]
    nbr = mat @ x.data
    pre = x.data @ p.W0.data.T + nbr @ p.W1.data.T + p.b.data
    out = pre * inv_norm
    w0, w1, b = p.W0, p.W1, p.b

    def bwd(g):
        gpre = g * inv_norm
        if b.requires_grad:
            ad.accumulate_grad(b, gpre.sum(axis=0))
        if w0.requires_grad:
            ad.accumulate_grad(w0, gpre.T @ x.data)
        if w1.requires_grad:
            ad.accumulate_grad(w1, gpre.T @ nbr)
        if x.requires_grad:
            ad.accumulate_grad(x, gpre @ w0.data
                               + mat @ (gpre @ w1.data))

    return ad.make_op(out, "graph_conv", (x, w0, w1, b), bwd)
