import math

import numpy as np
import pytest

import meshflow.autodiff as ad
from meshflow import featnet
from meshflow.featnet import UNet3d, UNetConfig, voxel_loss
from meshflow.voxgrid import centered_volume


def tiny_net(channels=(2, 3, 4, 3, 2), k=3, l=2, dtype=np.float32, seed=0):
    cfg = UNetConfig(channels=channels, n_classes=k, n_seg_outputs=l,
                     dtype=dtype)
    return UNet3d(cfg, np.random.default_rng(seed))


def rand_vol(shape, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return centered_volume(rng.random(shape, dtype=np.float32).astype(dtype))


def test_config_validation():
    with pytest.raises(ValueError):
        UNetConfig(channels=(4, 8, 4, 8))      # even length
    with pytest.raises(ValueError):
        UNetConfig(channels=(4, 8, 4), n_classes=1)
    with pytest.raises(ValueError):
        UNetConfig(channels=(4, 8, 4), n_seg_outputs=3)  # only 1 stage


def test_tap_names_desk_and_full_scale():
    desk = UNetConfig(channels=featnet.DESK_CHANNELS)
    assert desk.tap_names() == ["input", "enc0", "enc1", "bottleneck",
                                "dec1", "dec0", "seg"]
    full = UNetConfig(channels=featnet.FULL_SCALE_CHANNELS,
                      n_seg_outputs=3)
    names = full.tap_names()
    assert len(names) == 11          # 9 internal + input + seg
    assert names[0] == "input" and names[-1] == "seg"
    assert names[1:10] == ["enc0", "enc1", "enc2", "enc3", "bottleneck",
                           "dec3", "dec2", "dec1", "dec0"]


def test_four_stage_bottleneck_shape_on_64():
    net = tiny_net(channels=(2, 2, 2, 2, 2, 2, 2, 2, 2), l=3)
    taps, seg = net.forward(rand_vol((64, 64, 64)))
    by_name = {t.name: t for t in taps}
    assert by_name["bottleneck"].tensor.shape[1:] == (4, 4, 4)  # 64 / 2^4
    assert seg.probs.shape == (3, 64, 64, 64)
    assert len(seg.branch_logits) == 2
    assert [s for _, s in seg.branch_logits] == [4, 2]


def test_probabilities_sum_to_one():
    net = tiny_net()
    _, seg = net.forward(rand_vol((16, 16, 16)))
    np.testing.assert_allclose(seg.probs.data.sum(axis=0), 1.0, atol=1e-5)


def test_indivisible_shape_rejected_with_diagnostic():
    net = tiny_net()
    with pytest.raises(ValueError, match="pad to"):
        net.forward(rand_vol((15, 16, 16)))


def test_tap_metadata_tracks_resolution():
    net = tiny_net()
    vol = rand_vol((16, 16, 16))
    taps, _ = net.forward(vol)
    by_name = {t.name: t for t in taps}
    np.testing.assert_array_equal(by_name["enc0"].spacing, vol.spacing)
    np.testing.assert_array_equal(by_name["enc1"].spacing, vol.spacing * 2)
    np.testing.assert_array_equal(by_name["bottleneck"].spacing,
                                  vol.spacing * 4)
    np.testing.assert_array_equal(by_name["dec1"].spacing, vol.spacing * 2)
    for t in taps:
        np.testing.assert_array_equal(t.origin, vol.origin)
    assert [t.name for t in taps] == net.config.tap_names()


def test_voxel_loss_uniform_logits_is_log_k():
    net = tiny_net(l=1)
    _, seg = net.forward(rand_vol((8, 8, 8)))
    seg.logits.data[...] = 0.0
    seg.branch_logits = []
    labels = np.random.default_rng(0).integers(0, 3, size=(8, 8, 8))
    loss = voxel_loss(seg, labels, 3)
    assert loss.item() == pytest.approx(math.log(3), rel=1e-6)


def test_voxel_loss_perfect_logits_near_zero():
    net = tiny_net(l=1)
    _, seg = net.forward(rand_vol((8, 8, 8)))
    labels = np.random.default_rng(1).integers(0, 3, size=(8, 8, 8))
    onehot = np.eye(3, dtype=np.float32)[labels].transpose(3, 0, 1, 2)
    seg.logits = ad.Tensor(onehot * 100.0)
    seg.branch_logits = []
    assert voxel_loss(seg, labels, 3).item() < 1e-6


def test_voxel_loss_sums_branches():
    net = tiny_net(l=2)
    _, seg = net.forward(rand_vol((8, 8, 8)))
    labels = np.zeros((8, 8, 8), dtype=np.int64)
    full = voxel_loss(seg, labels, 3).item()
    seg_no_branch = featnet.SegmentationOutput(
        probs=seg.probs, logits=seg.logits, branch_logits=[])
    partial = voxel_loss(seg_no_branch, labels, 3).item()
    assert full > partial


def test_voxel_loss_label_range_checked():
    net = tiny_net(l=1)
    _, seg = net.forward(rand_vol((8, 8, 8)))
    labels = np.full((8, 8, 8), 3, dtype=np.int64)
    with pytest.raises(ValueError, match="label"):
        voxel_loss(seg, labels, 3)


def test_gradient_through_unet_and_voxel_loss():
    # f64 finite-difference check on a 16^3 volume with reduced channels
    cfg = UNetConfig(channels=(2, 3, 4, 3, 2), n_classes=2,
                     n_seg_outputs=2, dtype=np.float64)
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 2, size=(16, 16, 16))
    vol = centered_volume(rng.random((16, 16, 16)).astype(np.float64))
    net = UNet3d(cfg, np.random.default_rng(4))
    params = list(net.named_params())
    err = _param_grad_check(net, params, vol, labels)
    assert err < 1e-3


def _param_grad_check(net, params, vol, labels, eps=1e-6):
    """Central differences over a random subset of UNet parameters."""

    def loss_value():
        for bn in net.bn_layers():
            bn.running = {"mean": np.zeros_like(bn.running["mean"]),
                          "var": np.ones_like(bn.running["var"])}
        _, seg = net.forward(vol, training=True)
        return voxel_loss(seg, labels, 2)

    out = loss_value()
    for _, t in params:
        t.grad = None
    out.backward()
    grads = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
             for _, t in params]

    rng = np.random.default_rng(0)
    max_rel = 0.0
    with ad.no_grad():
        for pi in rng.choice(len(params), size=6, replace=False):
            _, t = params[pi]
            flat = t.data.reshape(-1)
            for ci in rng.choice(flat.size, size=min(3, flat.size),
                                 replace=False):
                orig = flat[ci]
                flat[ci] = orig + eps
                f_plus = loss_value().item()
                flat[ci] = orig - eps
                f_minus = loss_value().item()
                flat[ci] = orig
                numeric = (f_plus - f_minus) / (2 * eps)
                a = grads[pi].reshape(-1)[ci]
                rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                max_rel = max(max_rel, rel)
    return max_rel


def test_translation_covariance_interior():
    # shifting the input shifts the argmax map identically away from the
    # border (stride-2 stages need shifts in multiples of 4)
    net = tiny_net(seed=9)
    rng = np.random.default_rng(10)
    base = rng.random((16, 16, 16)).astype(np.float32)
    shift = 4
    shifted = np.roll(base, shift, axis=0)
    _, seg0 = net.forward(centered_volume(base))
    _, seg1 = net.forward(centered_volume(shifted))
    lab0 = seg0.probs.data.argmax(axis=0)
    lab1 = seg1.probs.data.argmax(axis=0)
    inner = slice(shift + 4, 16 - 4)
    agree = (np.roll(lab0, shift, axis=0)[inner] == lab1[inner]).mean()
    assert agree >= 0.99


def test_checkpoint_roundtrip_through_params(tmp_path):
    net = tiny_net(seed=11)
    arrays = {n: t.data for n, t in net.named_params()}
    ad.save_checkpoint(tmp_path / "u.ckpt", arrays)
    loaded, _ = ad.load_checkpoint(tmp_path / "u.ckpt")
    for n, t in net.named_params():
        assert np.array_equal(loaded[n], t.data)
