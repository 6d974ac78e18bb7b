"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Eager tape design: every operation computes its result immediately and, when
gradients are enabled and required, records the inputs plus a backward rule.
`backward()` on a scalar root accumulates gradients in reverse topological
order; gradients sum over fan-out. Float32 is the training dtype, float64 is
used by the finite-difference checker.
"""

from __future__ import annotations

import contextlib
import json
from typing import Callable, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    pass


class GradCheckError(ValueError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; ops become plain numpy evaluations."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A node in the recorded computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrapping a Tensor in a Tensor")
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = ""

    # -- basics ------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad}, op={self.op!r})")

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- backward -----------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode accumulation from a scalar root."""
        if self.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape "
                             f"{self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                # release graph edges; grads stay populated
                node._parents = ()
                node._backward = None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


_as_tensor = as_tensor


def _make(data, op: str, parents: Sequence[Tensor],
          backward: Callable | None) -> Tensor:
    rg = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    out.op = op
    if rg:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # fresh copy: g may alias an upstream buffer another accumulation
        # will receive as well
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g.astype(t.data.dtype, copy=False)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap plain scalars/arrays, adopting the Tensor operand's dtype."""
    if isinstance(a, Tensor):
        if isinstance(b, Tensor):
            return a, b
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    a = Tensor(np.asarray(a))
    return a, Tensor(np.asarray(b, dtype=a.dtype))


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, -_unbroadcast(g, b.data.shape))

    return _make(a.data - b.data, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, "mul", (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, "div", (a, b), bwd)


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, "matmul", (a, b), bwd)


def make_op(data, op: str, parents: Sequence[Tensor],
            backward: Callable | None) -> Tensor:
    """Hook for fused primitives defined outside this module."""
    return _make(data, op, parents, backward)


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    _accum(t, g)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def bwd(g):
        _accum(x, g * mask)

    return _make(np.maximum(x.data, 0), "relu", (x,), bwd)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out_data = np.exp(x.data)

    def bwd(g):
        _accum(x, g * out_data)

    return _make(out_data, "exp", (x,), bwd)


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    out_data = np.sqrt(x.data)

    def bwd(g):
        _accum(x, g * (0.5 / out_data))

    return _make(out_data, "sqrt", (x,), bwd)


def min_const(x, c: float) -> Tensor:
    """Elementwise minimum with a scalar constant."""
    x = _as_tensor(x)
    mask = x.data < c

    def bwd(g):
        _accum(x, g * mask)

    return _make(np.minimum(x.data, c), "min_const", (x,), bwd)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)

    def bwd(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(ge, x.data.shape))

    return _make(x.data.sum(axis=axis, keepdims=keepdims), "sum", (x,), bwd)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]

    def bwd(g):
        gn = g / n
        if axis is None:
            _accum(x, np.broadcast_to(gn, x.data.shape))
        else:
            ge = gn if keepdims else np.expand_dims(gn, axis)
            _accum(x, np.broadcast_to(ge, x.data.shape))

    return _make(x.data.mean(axis=axis, keepdims=keepdims), "mean", (x,), bwd)


def squared_norm(x, axis=None, keepdims: bool = False) -> Tensor:
    """Sum of squared entries, optionally along one axis."""
    x = _as_tensor(x)

    def bwd(g):
        if axis is None:
            _accum(x, 2.0 * x.data * g)
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(x, 2.0 * x.data * ge)

    return _make((x.data * x.data).sum(axis=axis, keepdims=keepdims),
                 "squared_norm", (x,), bwd)


def transpose2d(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose2d: expected 2-d, got {x.shape}")

    def bwd(g):
        _accum(x, g.T)

    return _make(x.data.T.copy(), "transpose", (x,), bwd)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)

    def bwd(g):
        _accum(x, g.reshape(x.data.shape))

    return _make(x.data.reshape(shape).copy(), "reshape", (x,), bwd)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of empty list")
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, s, e in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(s, e)
            _accum(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in ts], axis=axis),
                 "concat", ts, bwd)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        _accum(x, gx)

    return _make(x.data[sl].copy(), "slice", (x,), bwd)


def gather_rows(x, idx) -> Tensor:
    """Select rows by integer index; backward scatter-adds."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accum(x, gx)

    return _make(x.data[idx], "gather_rows", (x,), bwd)


def scatter_add_rows(x, idx, n_rows: int) -> Tensor:
    """Accumulate rows of x into n_rows bins given per-row bin indices."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] != x.shape[0]:
        raise ShapeError(f"scatter_add_rows: {idx.shape[0]} indices for "
                         f"{x.shape[0]} rows")
    out_data = np.zeros((n_rows,) + x.data.shape[1:], dtype=x.data.dtype)
    np.add.at(out_data, idx, x.data)

    def bwd(g):
        _accum(x, g[idx])

    return _make(out_data, "scatter_add_rows", (x,), bwd)


def neighbor_sum(x, matrix) -> Tensor:
    """Sparse neighbor aggregation: rows of x summed over graph neighbors.

    `matrix` must be a symmetric scipy CSR adjacency matrix.
    """
    x = _as_tensor(x)
    if matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"neighbor_sum: matrix {matrix.shape} vs rows "
                         f"{x.shape[0]}")

    def bwd(g):
        _accum(x, (matrix @ g).astype(x.data.dtype))

    return _make((matrix @ x.data).astype(x.data.dtype),
                 "neighbor_sum", (x,), bwd)


# ---------------------------------------------------------------------------
# convolution


def conv3d(x, w, b=None, stride: int = 1) -> Tensor:
    """3D convolution, kernel k in {1,2,3}, padding k//2, stride 1 or 2."""
    x = _as_tensor(x)
    w = _as_tensor(w)
    if x.ndim != 4 or w.ndim != 5:
        raise ShapeError(f"conv3d: expected x[C,D,H,W], w[Co,Ci,k,k,k]; got "
                         f"{x.shape}, {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv3d: in-channels {x.shape[0]} != weight "
                         f"expects {w.shape[1]}")
    bt = None if b is None else _as_tensor(b)
    parents = (x, w) if bt is None else (x, w, bt)
    out_data = _kernels.conv3d_forward(
        x.data, w.data, None if bt is None else bt.data, stride)

    def bwd(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            _accum(x, _kernels.conv3d_backward_input(g, w.data, x.data.shape,
                                                     stride))
        if w.requires_grad:
            _accum(w, _kernels.conv3d_backward_weight(g, x.data, w.data.shape,
                                                      stride))
        if bt is not None and bt.requires_grad:
            _accum(bt, g.sum(axis=(1, 2, 3)))

    return _make(out_data, "conv3d", parents, bwd)


def conv_transpose3d(x, w, b=None) -> Tensor:
    """Transposed 3D convolution, kernel 2, stride 2 (exact 2x upsampling)."""
    x = _as_tensor(x)
    w = _as_tensor(w)
    if x.shape[0] != w.shape[0]:
        raise ShapeError(f"conv_transpose3d: in-channels {x.shape[0]} != "
                         f"weight expects {w.shape[0]}")
    bt = None if b is None else _as_tensor(b)
    parents = (x, w) if bt is None else (x, w, bt)
    out_data = _kernels.convtrans3d_forward(
        x.data, w.data, None if bt is None else bt.data)

    def bwd(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            _accum(x, _kernels.convtrans3d_backward_input(g, w.data))
        if w.requires_grad:
            _accum(w, _kernels.convtrans3d_backward_weight(g, x.data,
                                                           w.data.shape))
        if bt is not None and bt.requires_grad:
            _accum(bt, g.sum(axis=(1, 2, 3)))

    return _make(out_data, "conv_transpose3d", parents, bwd)


# ---------------------------------------------------------------------------
# sampling


def trilinear_sample(vol, points, spacing, origin) -> Tensor:
    """Sample a [C,D,H,W] volume at world-space points [N,3] -> [N,C].

    Differentiable with respect to both the volume values and the point
    coordinates; out-of-bounds queries contribute zero (zero padding).
    """
    vol = _as_tensor(vol)
    pts = _as_tensor(points)
    if vol.ndim != 4 or pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"trilinear_sample: vol {vol.shape}, points "
                         f"{pts.shape}")
    spacing = np.asarray(spacing, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    ijk = (pts.data.astype(np.float64) - origin) / spacing
    out_data = _kernels.trilinear_gather(vol.data, ijk)

    def bwd(g):
        g = np.ascontiguousarray(g)
        if vol.requires_grad:
            _accum(vol, _kernels.trilinear_scatter(g, ijk, vol.data.shape))
        if pts.requires_grad:
            gp = _kernels.trilinear_point_grad(vol.data, ijk, g)
            _accum(pts, gp / spacing)

    return _make(out_data, "trilinear_sample", (vol, pts), bwd)


# ---------------------------------------------------------------------------
# classification losses


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Fused softmax + cross-entropy, mean over columns.

    logits [K, M]; labels int [M] with values in [0, K).
    """
    lg = _as_tensor(logits)
    labels = np.asarray(labels)
    if lg.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [K, M], "
                         f"got {lg.shape}")
    k, m = lg.shape
    if labels.shape != (m,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape}"
                         f" != ({m},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label outside [0, {k})")
    z = lg.data - lg.data.max(axis=0, keepdims=True)
    ez = np.exp(z)
    sm = ez / ez.sum(axis=0, keepdims=True)
    cols = np.arange(m)
    loss = float(np.mean(np.log(ez.sum(axis=0)) - z[labels, cols]))

    def bwd(g):
        gl = sm.copy()
        gl[labels, cols] -= 1.0
        _accum(lg, gl * (g / m))

    return _make(np.asarray(loss, dtype=lg.dtype), "softmax_ce", (lg,), bwd)


def softmax(x, axis: int = 0) -> Tensor:
    """Numerically stable softmax with the standard fused backward."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * z).sum(axis=axis, keepdims=True)
        _accum(x, z * (g - dot))

    return _make(z, "softmax", (x,), bwd)


def batch_norm(x, gamma, beta, axes, running: dict, training: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over the given axes with an analytic backward.

    With one sample per step, statistics are taken over the spatial axes
    (volumes) or the vertex axis (graphs). `running` holds 'mean' and 'var'
    arrays updated in train mode and used as constants in eval mode.
    """
    x = _as_tensor(x)
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    axes = tuple(axes)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running["mean"] = ((1 - momentum) * running["mean"] + momentum * mu)
        m = int(np.prod([x.shape[ax] for ax in axes]))
        unbiased = var * (m / max(m - 1, 1))
        running["var"] = (1 - momentum) * running["var"] + momentum * unbiased

        def bwd(g):
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=axes, keepdims=True))
            if beta.requires_grad:
                _accum(beta, g.sum(axis=axes, keepdims=True))
            if x.requires_grad:
                gh = g * gamma.data
                s1 = gh.sum(axis=axes, keepdims=True)
                s2 = (gh * xhat).sum(axis=axes, keepdims=True)
                _accum(x, inv * (gh - s1 / m - xhat * (s2 / m)))

        return _make(xhat * gamma.data + beta.data, "batch_norm",
                     (x, gamma, beta), bwd)

    inv_r = (1.0 / np.sqrt(running["var"] + eps)).astype(x.dtype)
    mean_r = running["mean"].astype(x.dtype)

    def bwd_eval(g):
        if gamma.requires_grad:
            xhat_e = (x.data - mean_r) * inv_r
            _accum(gamma, (g * xhat_e).sum(axis=axes, keepdims=True))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes, keepdims=True))
        if x.requires_grad:
            _accum(x, g * (gamma.data * inv_r))

    return _make((x.data - mean_r) * inv_r * gamma.data + beta.data,
                 "batch_norm_eval", (x, gamma, beta), bwd_eval)


# ---------------------------------------------------------------------------
# checkpoint I/O: one JSON manifest line + raw little-endian f32 blob


def save_checkpoint(path, named_arrays: dict, extra: dict | None = None):
    entries = []
    blobs = []
    offset = 0
    for name in sorted(named_arrays):
        arr = np.asarray(named_arrays[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset})
        blobs.append(np.ascontiguousarray(arr).tobytes())
        offset += len(blobs[-1])
    header = {"format": "meshflow-ckpt-v1", "dtype": "f32",
              "params": entries}
    if extra:
        header["extra"] = extra
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        blob = fh.read()
    arrays = {}
    for ent in header["params"]:
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count,
                            offset=ent["offset"]).reshape(shape)
        arrays[ent["name"]] = arr.copy()
    return arrays, header.get("extra", {})


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def grad_check(fn: Callable, inputs: Sequence[np.ndarray],
               eps: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` maps a list of Tensors to a scalar Tensor and must rebuild its
    graph on every call; inputs are checked in float64. Relative error per
    coordinate is |a - n| / max(1, |a|, |n|).
    """
    pts = [np.asarray(p, dtype=np.float64) for p in inputs]
    tensors = [Tensor(p.copy(), requires_grad=True) for p in pts]
    out = fn(tensors)
    if out.size != 1:
        raise ShapeError("grad_check: fn must return a scalar")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]

    def eval_at(arrays):
        with no_grad():
            return fn([Tensor(a) for a in arrays]).item()

    max_rel = 0.0
    for ti, p in enumerate(pts):
        flat_idx = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            r = rng or np.random.default_rng(0)
            flat_idx = r.choice(p.size, size=max_coords, replace=False)
        for i in flat_idx:
            bumped = [q.copy() for q in pts]
            bumped[ti].reshape(-1)[i] += eps
            f_plus = eval_at(bumped)
            bumped[ti].reshape(-1)[i] -= 2 * eps
            f_minus = eval_at(bumped)
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic[ti].reshape(-1)[i]
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise GradCheckError(f"non-finite gradient at input {ti}, "
                                     f"coordinate {i}: analytic={a}, "
                                     f"numeric={numeric}")
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            max_rel = max(max_rel, rel)
    return max_rel
