"""Hot numeric kernels with a compiled core and a pure-numpy fallback.

The Cython extension `_native` is preferred when it imported successfully;
set MESHFLOW_NO_NATIVE=1 to force the numpy implementations (used by the
parity tests and the kernel benchmark).
"""

from __future__ import annotations

import os

import numpy as np

from . import pyimpl

if os.environ.get("MESHFLOW_NO_NATIVE"):
    _native = None
else:
    try:
        from . import _native  # type: ignore[attr-defined]
    except ImportError:
        _native = None

HAVE_NATIVE = _native is not None

conv3d_out_shape = pyimpl.conv3d_out_shape


def _want_native(*arrays) -> bool:
    if _native is None:
        return False
    return all(a is None or a.dtype in (np.float32, np.float64)
               for a in arrays)


def conv3d_forward(x, w, b, stride):
    if _want_native(x, w, b) and x.dtype == w.dtype:
        return _native.conv3d_forward(
            np.ascontiguousarray(x), np.ascontiguousarray(w),
            None if b is None else np.ascontiguousarray(b), stride)
    return pyimpl.conv3d_forward(x, w, b, stride)


def conv3d_backward_input(gout, w, x_shape, stride):
    if _want_native(gout, w) and gout.dtype == w.dtype:
        return _native.conv3d_backward_input(
            np.ascontiguousarray(gout), np.ascontiguousarray(w),
            tuple(x_shape), stride)
    return pyimpl.conv3d_backward_input(gout, w, x_shape, stride)


def conv3d_backward_weight(gout, x, w_shape, stride):
    if _want_native(gout, x) and gout.dtype == x.dtype:
        return _native.conv3d_backward_weight(
            np.ascontiguousarray(gout), np.ascontiguousarray(x),
            tuple(w_shape), stride)
    return pyimpl.conv3d_backward_weight(gout, x, w_shape, stride)


convtrans3d_forward = pyimpl.convtrans3d_forward
convtrans3d_backward_input = pyimpl.convtrans3d_backward_input
convtrans3d_backward_weight = pyimpl.convtrans3d_backward_weight


def trilinear_gather(vol, ijk):
    if _want_native(vol) and ijk.dtype == np.float64:
        return _native.trilinear_gather(np.ascontiguousarray(vol),
                                        np.ascontiguousarray(ijk))
    return pyimpl.trilinear_gather(vol, ijk)


def trilinear_scatter(gout, ijk, vol_shape):
    if _want_native(gout) and ijk.dtype == np.float64:
        return _native.trilinear_scatter(np.ascontiguousarray(gout),
                                         np.ascontiguousarray(ijk),
                                         tuple(vol_shape))
    return pyimpl.trilinear_scatter(gout, ijk, vol_shape)


def trilinear_point_grad(vol, ijk, gout):
    if _want_native(vol, gout) and vol.dtype == gout.dtype \
            and ijk.dtype == np.float64:
        return _native.trilinear_point_grad(np.ascontiguousarray(vol),
                                            np.ascontiguousarray(ijk),
                                            np.ascontiguousarray(gout))
    return pyimpl.trilinear_point_grad(vol, ijk, gout)


nn_indices_bruteforce = pyimpl.nn_indices_bruteforce

# above this many target points, nearest-neighbor queries switch to the
# accelerated structure (compiled uniform grid, or a KD-tree fallback);
# both paths are cross-checked against each other in the tests
NN_ACCEL_THRESHOLD = 2_048


def nn_indices(queries, targets):
    """Nearest target index + squared distance per query point."""
    if len(targets) <= NN_ACCEL_THRESHOLD:
        if _native is not None:
            q = np.ascontiguousarray(queries, dtype=np.float64)
            t = np.ascontiguousarray(targets, dtype=np.float64)
            return _native.nn_bruteforce(q, t)
        return pyimpl.nn_indices_bruteforce(queries, targets)
    if _native is not None:
        q = np.ascontiguousarray(queries, dtype=np.float64)
        t = np.ascontiguousarray(targets, dtype=np.float64)
        return _native.nn_grid(q, t)
    return pyimpl.nn_indices_accel(queries, targets)


def point_triangle_distances(points, tri):
    if _native is not None:
        p = np.ascontiguousarray(points, dtype=np.float64)
        t = np.ascontiguousarray(tri, dtype=np.float64)
        return _native.point_triangle_distances(p, t)
    return pyimpl.point_triangle_distances(points, tri)
