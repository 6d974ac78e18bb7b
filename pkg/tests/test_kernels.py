"""Parity between the compiled kernels and the pure-numpy fallback.

Every public kernel must give the same answer on both paths; the benchmark
in benchmarks/kernel_bench.py compares their speed.
"""

import numpy as np
import pytest

import meshflow._kernels as K
from meshflow._kernels import pyimpl

native = pytest.importorskip("meshflow._kernels._native",
                             reason="native kernels not built")


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("k", [1, 2, 3])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_conv3d_parity(stride, k, dtype):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 6, 7, 9)).astype(dtype)
    w = rng.normal(size=(4, 3, k, k, k)).astype(dtype)
    b = rng.normal(size=4).astype(dtype)
    tol = 1e-4 if dtype == np.float32 else 1e-10
    out_n = native.conv3d_forward(x, w, b, stride)
    out_p = pyimpl.conv3d_forward(x, w, b, stride)
    np.testing.assert_allclose(out_n, out_p, atol=tol)
    g = rng.normal(size=out_n.shape).astype(dtype)
    np.testing.assert_allclose(
        native.conv3d_backward_input(g, w, x.shape, stride),
        pyimpl.conv3d_backward_input(g, w, x.shape, stride), atol=tol)
    np.testing.assert_allclose(
        native.conv3d_backward_weight(g, x, w.shape, stride),
        pyimpl.conv3d_backward_weight(g, x, w.shape, stride), atol=tol)


def test_conv3d_no_bias_parity():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 4, 4, 4)).astype(np.float64)
    w = rng.normal(size=(3, 2, 3, 3, 3))
    np.testing.assert_allclose(native.conv3d_forward(x, w, None, 1),
                               pyimpl.conv3d_forward(x, w, None, 1),
                               atol=1e-12)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_trilinear_parity(dtype):
    rng = np.random.default_rng(3)
    vol = rng.normal(size=(5, 6, 7, 8)).astype(dtype)
    ijk = rng.uniform(-2, 9, size=(200, 3))
    tol = 1e-4 if dtype == np.float32 else 1e-12
    np.testing.assert_allclose(native.trilinear_gather(vol, ijk),
                               pyimpl.trilinear_gather(vol, ijk), atol=tol)
    g = rng.normal(size=(200, 5)).astype(dtype)
    np.testing.assert_allclose(
        native.trilinear_scatter(g, ijk, vol.shape),
        pyimpl.trilinear_scatter(g, ijk, vol.shape), atol=tol)
    np.testing.assert_allclose(
        native.trilinear_point_grad(vol, ijk, g),
        pyimpl.trilinear_point_grad(vol, ijk, g),
        atol=1e-3 if dtype == np.float32 else 1e-12)


def test_nn_bruteforce_parity():
    rng = np.random.default_rng(4)
    q = rng.normal(size=(300, 3)) * 5
    t = rng.normal(size=(400, 3)) * 5
    i_n, d_n = native.nn_bruteforce(q, t)
    i_p, d_p = pyimpl.nn_indices_bruteforce(q, t)
    np.testing.assert_allclose(d_n, d_p, rtol=1e-9)
    assert np.array_equal(i_n, i_p)


@pytest.mark.parametrize("scale", [0.1, 1.0, 50.0])
def test_nn_grid_matches_bruteforce(scale):
    rng = np.random.default_rng(5)
    t = rng.normal(size=(3000, 3)) * scale
    q = np.concatenate([rng.normal(size=(500, 3)) * scale,
                        t[:50] + 1e-9])   # include near-duplicates
    i_g, d_g = native.nn_grid(np.ascontiguousarray(q),
                              np.ascontiguousarray(t))
    i_b, d_b = pyimpl.nn_indices_bruteforce(q, t)
    # the |a|^2+|b|^2-2ab formulation of the brute force cancels
    # catastrophically for near-duplicates; the grid computes differences
    # directly, so allow absolute slack at that magnitude
    np.testing.assert_allclose(d_g, d_b, rtol=1e-9,
                               atol=1e-12 * max(scale, 1.0) ** 2)


def test_nn_accel_fallback_matches_bruteforce():
    rng = np.random.default_rng(6)
    t = rng.normal(size=(2500, 3))
    q = rng.normal(size=(400, 3))
    i_a, d_a = pyimpl.nn_indices_accel(q, t)
    i_b, d_b = pyimpl.nn_indices_bruteforce(q, t)
    np.testing.assert_allclose(d_a, d_b, rtol=1e-9)


def test_dispatch_threshold_consistency():
    rng = np.random.default_rng(7)
    t_small = rng.normal(size=(100, 3))
    t_large = rng.normal(size=(K.NN_ACCEL_THRESHOLD + 10, 3))
    q = rng.normal(size=(50, 3))
    for t in (t_small, t_large):
        idx, d2 = K.nn_indices(q, t)
        i_b, d_b = pyimpl.nn_indices_bruteforce(q, t)
        np.testing.assert_allclose(d2, d_b, rtol=1e-9)


def test_point_triangle_parity():
    rng = np.random.default_rng(8)
    tri = rng.normal(size=(60, 3, 3)) * 3
    pts = rng.normal(size=(150, 3)) * 4
    d_n = native.point_triangle_distances(pts, tri)
    d_p = pyimpl.point_triangle_distances(pts, tri)
    np.testing.assert_allclose(d_n, d_p, rtol=1e-9, atol=1e-12)


def test_point_triangle_against_feature_oracle():
    from oracles import points_to_mesh_distances
    from meshflow.meshcore import icosphere

    m = icosphere(1, radius=2.0)
    rng = np.random.default_rng(9)
    pts = rng.normal(size=(40, 3)) * 3
    d_k = K.point_triangle_distances(pts, m.vertices[m.faces])
    d_o = points_to_mesh_distances(pts, m.vertices, m.faces)
    np.testing.assert_allclose(d_k, d_o, rtol=1e-9, atol=1e-12)


def test_convtranspose_kernels_match_fallback():
    # transposed conv stays numpy-only; exercised through the dispatch
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 3, 3, 3)).astype(np.float32)
    w = rng.normal(size=(2, 4, 2, 2, 2)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    out = K.convtrans3d_forward(x, w, b)
    assert out.shape == (4, 6, 6, 6)
    # spot-check one voxel against the definition
    o = np.zeros(4)
    for ci in range(2):
        o += w[ci, :, 1, 0, 1] * x[ci, 1, 2, 0]
    np.testing.assert_allclose(out[:, 3, 4, 1], o + b, rtol=1e-5)
