"""Voxel feature extractor: residual 3D UNet with deep supervision.

Produces a 3-class segmentation plus the internal feature maps tapped for
hypercolumn assembly (encoder stages, bottleneck, decoder stages; the input
volume and the segmentation output complete the tap set).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import BatchNorm, Conv3d, ConvTranspose3d
from .voxgrid import FeatureVolume

FULL_SCALE_CHANNELS = (16, 32, 64, 128, 256, 64, 32, 16, 8)
DESK_CHANNELS = (8, 16, 32, 16, 8)


@dataclass
class UNetConfig:
    channels: tuple = DESK_CHANNELS
    n_classes: int = 3
    n_seg_outputs: int = 2     # L: final output + (L-1) deep-supervision taps
    dtype: type = np.float32

    def __post_init__(self):
        if len(self.channels) % 2 == 0 or len(self.channels) < 3:
            raise ValueError("channels must list n encoder stages, the "
                             "bottleneck, and n decoder stages")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        n = self.n_stages
        if not (1 <= self.n_seg_outputs <= n):
            raise ValueError(f"n_seg_outputs must be in [1, {n}]")

    @property
    def n_stages(self) -> int:
        return (len(self.channels) - 1) // 2

    @property
    def encoder_channels(self) -> tuple:
        return self.channels[:self.n_stages]

    @property
    def bottleneck_channels(self) -> int:
        return self.channels[self.n_stages]

    @property
    def decoder_channels(self) -> tuple:
        # listed deepest first; decoder_channels[i] lives at level n-1-i
        return self.channels[self.n_stages + 1:]

    def tap_names(self) -> list[str]:
        n = self.n_stages
        return (["input"] + [f"enc{i}" for i in range(n)] + ["bottleneck"]
                + [f"dec{i}" for i in reversed(range(n))] + ["seg"])


@dataclass
class Tap:
    """One hypercolumn source: a feature map with its own world metadata."""

    name: str
    tensor: Tensor
    spacing: np.ndarray
    origin: np.ndarray

    @property
    def n_channels(self) -> int:
        return self.tensor.shape[0]


@dataclass
class SegmentationOutput:
    """Final class probabilities plus deep-supervision logit branches."""

    probs: Tensor                      # [K, D, H, W], softmax over K
    logits: Tensor                     # same resolution as probs
    branch_logits: list = field(default_factory=list)   # [(Tensor, scale)]


class ResBlock3d:
    """conv-BN-ReLU, conv-BN, add skip (1x1x1 conv if widths differ), ReLU."""

    def __init__(self, cin, cout, rng, dtype=np.float32):
        self.conv1 = Conv3d(cin, cout, rng, dtype=dtype)
        self.bn1 = BatchNorm(cout, "vol", dtype=dtype)
        self.conv2 = Conv3d(cout, cout, rng, dtype=dtype)
        self.bn2 = BatchNorm(cout, "vol", dtype=dtype)
        self.skip = Conv3d(cin, cout, rng, k=1, dtype=dtype) \
            if cin != cout else None

    def __call__(self, x, training):
        h = ad.relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        s = self.skip(x) if self.skip is not None else x
        return ad.relu(h + s)

    def named_params(self, prefix):
        yield from self.conv1.named_params(f"{prefix}.conv1")
        yield from self.bn1.named_params(f"{prefix}.bn1")
        yield from self.conv2.named_params(f"{prefix}.conv2")
        yield from self.bn2.named_params(f"{prefix}.bn2")
        if self.skip is not None:
            yield from self.skip.named_params(f"{prefix}.skip")

    def named_buffers(self, prefix):
        yield from self.bn1.named_buffers(f"{prefix}.bn1")
        yield from self.bn2.named_buffers(f"{prefix}.bn2")

    def bn_layers(self):
        return [self.bn1, self.bn2]


class UNet3d:
    """Residual UNet over [1, D, H, W] volumes, stride-2 down/up sampling."""

    def __init__(self, config: UNetConfig, rng):
        self.config = config
        c = config
        n = c.n_stages
        dt = c.dtype
        enc = c.encoder_channels
        dec = c.decoder_channels
        self.stem = ResBlock3d(1, enc[0], rng, dt)
        self.down_convs = []
        self.enc_blocks = []
        chain = list(enc) + [c.bottleneck_channels]
        for i in range(n):
            self.down_convs.append(
                Conv3d(chain[i], chain[i + 1], rng, stride=2, dtype=dt))
            self.enc_blocks.append(
                ResBlock3d(chain[i + 1], chain[i + 1], rng, dt))
        self.up_convs = []
        self.dec_blocks = []
        prev = c.bottleneck_channels
        for i in range(n):
            level = n - 1 - i
            skip_ch = enc[level]
            self.up_convs.append(ConvTranspose3d(prev, dec[i], rng, dt))
            self.dec_blocks.append(
                ResBlock3d(dec[i] + skip_ch, dec[i], rng, dt))
            prev = dec[i]
        self.seg_head = Conv3d(dec[-1], c.n_classes, rng, k=1, dtype=dt)
        # deep-supervision heads attach to the L-1 decoder stages that
        # precede the final one (deepest of those first)
        self.branch_heads = []
        for b in range(c.n_seg_outputs - 1):
            i = n - 1 - (c.n_seg_outputs - 1) + b
            self.branch_heads.append(
                Conv3d(dec[i], c.n_classes, rng, k=1, dtype=dt))

    def named_params(self, prefix="unet"):
        yield from self.stem.named_params(f"{prefix}.stem")
        for i, (dcv, blk) in enumerate(zip(self.down_convs, self.enc_blocks)):
            yield from dcv.named_params(f"{prefix}.down{i}")
            yield from blk.named_params(f"{prefix}.enc{i}")
        for i, (ucv, blk) in enumerate(zip(self.up_convs, self.dec_blocks)):
            yield from ucv.named_params(f"{prefix}.up{i}")
            yield from blk.named_params(f"{prefix}.dec{i}")
        yield from self.seg_head.named_params(f"{prefix}.seg_head")
        for b, head in enumerate(self.branch_heads):
            yield from head.named_params(f"{prefix}.branch{b}")

    def named_buffers(self, prefix="unet"):
        yield from self.stem.named_buffers(f"{prefix}.stem")
        for i, blk in enumerate(self.enc_blocks):
            yield from blk.named_buffers(f"{prefix}.enc{i}")
        for i, blk in enumerate(self.dec_blocks):
            yield from blk.named_buffers(f"{prefix}.dec{i}")

    def bn_layers(self):
        out = list(self.stem.bn_layers())
        for blk in self.enc_blocks + self.dec_blocks:
            out += blk.bn_layers()
        return out

    def forward(self, vol: FeatureVolume, training: bool = False):
        """Run the UNet; returns (taps, SegmentationOutput).

        taps is the full hypercolumn source list in fixed order:
        input, enc0..enc{n-1}, bottleneck, dec{n-1}..dec0, seg.
        """
        cfg = self.config
        n = cfg.n_stages
        shape = vol.data.shape[1:]
        div = 2 ** n
        bad = [s for s in shape if s % div]
        if bad:
            need = tuple(-(-s // div) * div for s in shape)
            raise ValueError(
                f"input shape {tuple(shape)} not divisible by 2^{n}; "
                f"pad to {need} (e.g. with voxgrid.pad_to)")
        x = ad.as_tensor(np.asarray(vol.data, dtype=cfg.dtype))

        taps = [Tap("input", x, vol.spacing.copy(), vol.origin.copy())]

        def level_meta(level):
            return vol.spacing * (2 ** level), vol.origin.copy()

        h = self.stem(x, training)
        skips = [h]
        taps.append(Tap("enc0", h, *level_meta(0)))
        for i in range(n):
            h = self.down_convs[i](h)
            h = self.enc_blocks[i](h, training)
            if i < n - 1:
                skips.append(h)
                taps.append(Tap(f"enc{i + 1}", h, *level_meta(i + 1)))
        taps.append(Tap("bottleneck", h, *level_meta(n)))

        branch_logits = []
        for i in range(n):
            level = n - 1 - i
            h = self.up_convs[i](h)
            h = ad.concat([h, skips[level]], axis=0)
            h = self.dec_blocks[i](h, training)
            taps.append(Tap(f"dec{level}", h, *level_meta(level)))
            b = i - (n - 1 - (cfg.n_seg_outputs - 1))
            if 0 <= b < cfg.n_seg_outputs - 1:
                branch_logits.append((self.branch_heads[b](h), 2 ** level))

        logits = self.seg_head(h)
        probs = ad.softmax(logits, axis=0)
        seg = SegmentationOutput(probs=probs, logits=logits,
                                 branch_logits=branch_logits)
        taps.append(Tap("seg", probs, vol.spacing.copy(), vol.origin.copy()))
        return taps, seg


def unet_forward(net: UNet3d, vol: FeatureVolume, training: bool = False):
    return net.forward(vol, training)


def voxel_loss(seg: SegmentationOutput, labels: np.ndarray,
               n_classes: int) -> ad.Tensor:
    """Cross-entropy summed over the final output and every branch.

    Branch targets are the full-resolution labels downsampled by
    nearest-neighbor (strided picks at the voxel mapped to each coarse cell).
    """
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"label outside [0, {n_classes})")
    k = seg.logits.shape[0]
    total = ad.softmax_cross_entropy(
        ad.reshape(seg.logits, (k, -1)), labels.reshape(-1))
    for logits, scale in seg.branch_logits:
        lab = labels[::scale, ::scale, ::scale]
        total = total + ad.softmax_cross_entropy(
            ad.reshape(logits, (k, -1)), lab.reshape(-1))
    return total
