import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import meshflow.autodiff as ad
from meshflow.autodiff import Tensor

# ---------------------------------------------------------------------------
# forward values


def test_relu_forward():
    assert ad.relu(Tensor(np.array(-3.0))).item() == 0.0
    assert ad.relu(Tensor(np.array(2.5))).item() == 2.5


def test_uniform_softmax_ce_is_log_k():
    logits = np.zeros((3, 4))
    labels = np.array([0, 1, 2, 0])
    out = ad.softmax_cross_entropy(Tensor(logits), labels)
    assert out.item() == pytest.approx(math.log(3), rel=1e-12)


def test_square_forward():
    x = Tensor(np.array(2.0))
    assert ad.mul(x, x).item() == 4.0


def test_shape_errors_name_the_primitive():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ad.ShapeError, match="conv3d"):
        ad.conv3d(Tensor(np.zeros((2, 4, 4, 4))),
                  Tensor(np.zeros((3, 5, 3, 3, 3))))
    with pytest.raises(ad.ShapeError, match="softmax_cross_entropy"):
        ad.softmax_cross_entropy(Tensor(np.zeros((3, 4))), np.zeros(5,
                                                                    dtype=int))


# ---------------------------------------------------------------------------
# backward basics


def test_dx_squared():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = ad.mul(x, x)
    y.backward()
    assert x.grad == pytest.approx(4.0)


def test_mean_relu_subgradient():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    ad.tmean(ad.relu(x)).backward()
    np.testing.assert_allclose(x.grad, [0.0, 0.5])


def test_fanout_accumulates():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = ad.add(x, x)
    y.backward()
    assert x.grad == pytest.approx(2.0)


def test_backward_requires_scalar_root():
    x = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ad.ShapeError, match="scalar"):
        ad.mul(x, 2.0).backward()


def test_backward_determinism_bitwise():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(6, 4)).astype(np.float32)
    b = rng.normal(size=(4, 3)).astype(np.float32)

    def run():
        ta = Tensor(a.copy(), requires_grad=True)
        tb = Tensor(b.copy(), requires_grad=True)
        out = ad.tsum(ad.relu(ad.matmul(ta, tb)))
        out.backward()
        return out.data.copy(), ta.grad.copy(), tb.grad.copy()

    r1 = run()
    r2 = run()
    for x, y in zip(r1, r2):
        assert np.array_equal(x, y)


@given(st.floats(min_value=-3, max_value=3),
       st.floats(min_value=-3, max_value=3))
@settings(max_examples=30, deadline=None)
def test_backward_linearity(alpha, beta):
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=5)

    def grad_of(fn):
        t = Tensor(x0.copy(), requires_grad=True)
        fn(t).backward()
        return t.grad.copy()

    f = lambda t: ad.squared_norm(t)
    g = lambda t: ad.tsum(ad.mul(t, Tensor(np.arange(5.0))))
    combo = lambda t: ad.add(ad.mul(f(t), alpha), ad.mul(g(t), beta))
    lhs = grad_of(combo)
    rhs = alpha * grad_of(f) + beta * grad_of(g)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9)


# ---------------------------------------------------------------------------
# finite-difference suite: every primitive, 20 random trials


def _check(fn, inputs, tol=1e-4, eps=1e-5):
    err = ad.grad_check(fn, inputs, eps=eps)
    assert err < tol, f"max relative error {err}"


N_TRIALS = 20


@pytest.mark.parametrize("trial", range(N_TRIALS))
def test_grad_elementwise_and_reductions(trial):
    rng = np.random.default_rng(100 + trial)
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(4, 5))
    c = rng.normal(size=(1, 5))
    _check(lambda t: ad.tsum(ad.mul(ad.add(t[0], t[1]), t[0])), [a, b])
    _check(lambda t: ad.tmean(ad.div(t[0], ad.add(ad.mul(t[1], t[1]), 1.0))),
           [a, b])
    _check(lambda t: ad.squared_norm(ad.sub(t[0], t[1])), [a, c])
    _check(lambda t: ad.tsum(ad.sqrt(ad.add(ad.mul(t[0], t[0]), 0.5))), [a])
    _check(lambda t: ad.tsum(ad.exp(ad.mul(t[0], 0.3))), [a])
    _check(lambda t: ad.tmean(ad.squared_norm(t[0], axis=1)), [a])


@pytest.mark.parametrize("trial", range(N_TRIALS))
def test_grad_matmul_relu_concat_slice(trial):
    rng = np.random.default_rng(200 + trial)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    c = rng.normal(size=(3, 2))
    _check(lambda t: ad.tsum(ad.matmul(t[0], t[1])), [a, b])
    # relu checked away from the kink
    a_safe = a + np.sign(a) * 0.1
    _check(lambda t: ad.tsum(ad.relu(t[0])), [a_safe])
    _check(lambda t: ad.squared_norm(
        ad.concat([ad.matmul(t[0], t[1]), t[2]], axis=1)), [a, b, c])
    _check(lambda t: ad.tsum(ad.slice_axis(t[0], 1, 1, 3)), [a])
    _check(lambda t: ad.squared_norm(ad.transpose2d(t[0])), [a])
    _check(lambda t: ad.squared_norm(ad.reshape(t[0], (2, 6))), [a])


@pytest.mark.parametrize("trial", range(N_TRIALS))
def test_grad_min_const(trial):
    rng = np.random.default_rng(300 + trial)
    a = rng.normal(size=(4, 4)) * 2
    # keep entries away from the clamp point
    a = np.where(np.abs(a - 0.5) < 0.05, a + 0.2, a)
    _check(lambda t: ad.tsum(ad.min_const(t[0], 0.5)), [a])


@pytest.mark.parametrize("trial", range(N_TRIALS))
def test_grad_gather_scatter(trial):
    rng = np.random.default_rng(400 + trial)
    x = rng.normal(size=(6, 3))
    idx = rng.integers(0, 6, size=10)
    w = rng.normal(size=(10, 3))
    _check(lambda t: ad.squared_norm(ad.mul(ad.gather_rows(t[0], idx),
                                            Tensor(w))), [x])
    _check(lambda t: ad.squared_norm(ad.scatter_add_rows(t[0], idx, 6)),
           [w])


@pytest.mark.parametrize("trial", range(N_TRIALS))
def test_grad_neighbor_sum(trial):
    from meshflow.meshcore import build_adjacency, icosphere
    adj = build_adjacency(icosphere(0))
    rng = np.random.default_rng(500 + trial)
    x = rng.normal(size=(12, 3))
    _check(lambda t: ad.squared_norm(ad.neighbor_sum(t[0], adj.matrix)), [x])


@pytest.mark.parametrize("trial", range(N_TRIALS))
def test_grad_conv3d(trial):
    rng = np.random.default_rng(600 + trial)
    x = rng.normal(size=(1, 4, 4, 4))
    w = rng.normal(size=(2, 1, 3, 3, 3)) * 0.5
    b = rng.normal(size=2)
    stride = 1 if trial % 2 == 0 else 2
    _check(lambda t: ad.squared_norm(ad.conv3d(t[0], t[1], t[2], stride)),
           [x, w, b])


@pytest.mark.parametrize("trial", range(N_TRIALS))
def test_grad_conv_transpose3d(trial):
    rng = np.random.default_rng(700 + trial)
    x = rng.normal(size=(2, 3, 3, 3))
    w = rng.normal(size=(2, 2, 2, 2, 2)) * 0.5
    b = rng.normal(size=2)
    _check(lambda t: ad.squared_norm(ad.conv_transpose3d(t[0], t[1], t[2])),
           [x, w, b])


@pytest.mark.parametrize("trial", range(N_TRIALS))
def test_grad_batch_norm(trial):
    rng = np.random.default_rng(800 + trial)
    x = rng.normal(size=(7, 3)) * 2
    gamma = rng.normal(size=(1, 3)) + 1.5
    beta = rng.normal(size=(1, 3))
    _check(lambda t: ad.squared_norm(ad.batch_norm(
        t[0], t[1], t[2], (0,),
        {"mean": np.zeros((1, 3)), "var": np.ones((1, 3))}, True)),
        [x, gamma, beta], tol=1e-4)
    run = {"mean": rng.normal(size=(1, 3)) * 0.1,
           "var": np.abs(rng.normal(size=(1, 3))) + 0.5}
    _check(lambda t: ad.squared_norm(ad.batch_norm(
        t[0], t[1], t[2], (0,), run, False)), [x, gamma, beta])


@pytest.mark.parametrize("trial", range(N_TRIALS))
def test_grad_softmax_cross_entropy(trial):
    rng = np.random.default_rng(900 + trial)
    logits = rng.normal(size=(3, 6))
    labels = rng.integers(0, 3, size=6)
    _check(lambda t: ad.softmax_cross_entropy(t[0], labels), [logits])
    c = Tensor(rng.normal(size=(3, 6)))
    _check(lambda t: ad.tsum(ad.mul(ad.softmax(t[0], axis=0), c)), [logits])


@pytest.mark.parametrize("trial", range(N_TRIALS))
def test_grad_trilinear_sample(trial):
    rng = np.random.default_rng(1000 + trial)
    vol = rng.normal(size=(2, 5, 5, 5))
    # keep points off the integer lattice so finite differences see a
    # smooth function (slopes are piecewise constant in the coords)
    pts = rng.uniform(0.1, 3.9, size=(8, 3))
    pts += np.where(np.abs(pts - np.round(pts)) < 0.02, 0.05, 0.0)
    _check(lambda t: ad.squared_norm(ad.trilinear_sample(
        t[0], t[1], (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))), [vol, pts])


def test_grad_check_reports_nonfinite():
    def bad(ts):
        return ad.tsum(ad.div(ts[0], ad.sub(ts[0], ts[0])))

    with np.errstate(divide="ignore", invalid="ignore"):
        with pytest.raises(ad.GradCheckError, match="coordinate"):
            ad.grad_check(bad, [np.ones(2)])


# ---------------------------------------------------------------------------
# no_grad and graph bookkeeping


def test_no_grad_blocks_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 2.0)
    assert not y.requires_grad
    assert y._parents == ()


def test_populated_grads_on_reachable_nodes():
    x = Tensor(np.ones(3), requires_grad=True)
    h = ad.mul(x, 2.0)
    out = ad.tsum(h)
    out.backward()
    assert h.grad is not None
    assert x.grad is not None


# ---------------------------------------------------------------------------
# checkpoint round-trip


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    arrays = {"w": rng.normal(size=(3, 4)).astype(np.float32),
              "b": rng.normal(size=4).astype(np.float32),
              "scalar": np.float32(3.25).reshape(())}
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(path, arrays, extra={"arch": {"hidden": 64}})
    loaded, extra = ad.load_checkpoint(path)
    assert extra == {"arch": {"hidden": 64}}
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert np.array_equal(loaded[k],
                              np.asarray(arrays[k], dtype=np.float32))
    # writing again is byte-identical
    p2 = tmp_path / "model2.ckpt"
    ad.save_checkpoint(p2, arrays, extra={"arch": {"hidden": 64}})
    assert path.read_bytes() == p2.read_bytes()
