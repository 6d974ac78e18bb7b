"""Training and inference orchestration: AdamW with two parameter groups,
cyclic learning rates, validation-driven early stopping, checkpointing, and
batch evaluation."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import metrics, synthdata
from .autodiff import Tensor
from .featnet import voxel_loss
from .graphdef import (DeformationModel, ModelConfig, NumericsError,
                       TemplateContext, deform)
from .losses import LossWeights, SurfaceTarget, mesh_loss, total_loss
from .meshcore import curvature_weights, discrete_mean_curvature
from .voxgrid import FeatureVolume, pad_to

logger = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Raised when the loss goes non-finite; last good state was saved."""


@dataclass
class TrainConfig:
    data_dir: str = ""
    out_dir: str = ""
    epochs: int = 105                 # hard cap
    lr_cnn: float = 1e-4
    lr_gnn: float = 5e-5
    max_lr_factor: float = 10.0
    cycle_period: int = 10            # epochs per triangular cycle
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    lambda_edge: float = 1.0
    lambda_nc: float = 0.0001
    k_max: float = 5.0
    curvature_scale: float = 1.0
    n_sample: int = 5000
    val_n_sample: int = 10000
    patience: int = 10
    min_epochs: int = 1
    seed: int = 0
    max_seconds: float | None = None  # optional wall-clock budget
    target_val_assd: float | None = None  # stop once validation reaches this
    model: ModelConfig = field(default_factory=ModelConfig)

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_edge=self.lambda_edge,
                           lambda_nc=self.lambda_nc, k_max=self.k_max,
                           n_sample=self.n_sample)


def paper_preset(config: TrainConfig) -> TrainConfig:
    """Full-scale constants: UNet channels up to 256, three segmentation
    outputs, 50k loss samples, 192x208x192 input padding, the reference
    loss weights and base learning rates, and the 105-epoch cap."""
    config.model = ModelConfig(
        unet_channels=(16, 32, 64, 128, 256, 64, 32, 16, 8),
        n_classes=3, n_seg_outputs=3, n_node_blocks=2, euler_steps=5,
        hidden=64, pad_shape=(192, 208, 192))
    config.n_sample = 50_000
    config.val_n_sample = 100_000
    config.lr_cnn = 1e-4
    config.lr_gnn = 5e-5
    config.lambda_edge = 1.0
    config.lambda_nc = 0.0001
    config.k_max = 5.0
    config.epochs = 105
    return config


# ---------------------------------------------------------------------------
# optimization


def cyclic_lr(step: int, base_lr: float, max_lr: float, period: int) -> float:
    """Triangular wave: base at cycle start, max at half period."""
    if period <= 0:
        raise ValueError("period must be positive")
    phase = (step % period) / period
    tri = 1.0 - abs(2.0 * phase - 1.0)
    return base_lr + (max_lr - base_lr) * tri


class AdamW:
    """Adam with decoupled weight decay.

    Decay multiplies parameters by (1 - lr*wd) independently of the
    gradient-moment step; non-finite gradients skip the affected parameter
    and increment `skipped`.
    """

    def __init__(self, params: list[Tensor], lr: float,
                 betas=(0.9, 0.999), weight_decay: float = 0.0,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.skipped = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                self.skipped += 1
                continue
            g = g.astype(np.float64)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            upd = mhat / (np.sqrt(vhat) + self.eps)
            new = p.data.astype(np.float64) * (1.0 - self.lr
                                               * self.weight_decay) \
                - self.lr * upd
            p.data = new.astype(p.data.dtype)


def init_model(config: TrainConfig) -> DeformationModel:
    """Seed-deterministic model; output heads are zero by construction."""
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((config.seed, 0xA11))))
    return DeformationModel(config.model, rng)


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class TrainingScene:
    intensity: FeatureVolume
    labels: np.ndarray
    targets: list                   # SurfaceTarget per surface class


def prepare_scene(loaded: synthdata.LoadedScene, k_max: float,
                  curvature_scale: float,
                  pad_shape: tuple | None = None) -> TrainingScene:
    targets = []
    for mesh in (loaded.inner, loaded.outer):
        curv = discrete_mean_curvature(mesh)
        w = curvature_weights(curv.raw_mean_curvature, k_max,
                              curvature_scale)
        targets.append(SurfaceTarget(mesh=mesh, curvature_weights=w))
    intensity = loaded.intensity
    labels = loaded.labels
    if pad_shape is not None:
        intensity = pad_to(intensity, pad_shape)
        before = [(t - c) // 2 for t, c in zip(pad_shape, labels.shape)]
        after = [t - c - b
                 for t, c, b in zip(pad_shape, labels.shape, before)]
        labels = np.pad(labels, list(zip(before, after)))  # 0 = background
    return TrainingScene(intensity=intensity, labels=labels,
                         targets=targets)


def load_corpus(data_dir, ids, k_max: float = 5.0,
                curvature_scale: float = 1.0,
                pad_shape: tuple | None = None) -> list[TrainingScene]:
    out = []
    for i in ids:
        loaded = synthdata.load_scene(Path(data_dir) / f"scene_{i:04d}")
        out.append(prepare_scene(loaded, k_max, curvature_scale, pad_shape))
    return out


def _sub_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(tuple(int(p) for p in parts))
               .generate_state(1)[0])


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    best_ckpt: str
    last_ckpt: str
    log_rows: list
    best_val_assd: float
    stop_reason: str


LOG_FIELDS = ["epoch", "train_loss", "vox_loss", "mesh_loss", "val_assd",
              "lr_cnn", "lr_gnn"]


def validation_assd(model: DeformationModel, scenes, ctx: TemplateContext,
                    n_sample: int, seed: int) -> float:
    vals = []
    with ad.no_grad():
        for sc in scenes:
            result = deform(model, sc.intensity, ctx, training=False)
            for mesh, target in zip(result.surface_set.surfaces, sc.targets):
                vals.append(metrics.assd(mesh, target.mesh, n=n_sample,
                                         seed=seed))
    return float(np.mean(vals))


def train(config: TrainConfig) -> TrainResult:
    """Optimize the model on the corpus under `config`; returns checkpoint
    paths and the per-epoch log."""
    t_start = time.monotonic()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = synthdata.load_splits(config.data_dir)
    train_scenes = load_corpus(config.data_dir, splits["train"],
                               config.k_max, config.curvature_scale,
                               config.model.pad_shape)
    val_scenes = load_corpus(config.data_dir, splits["val"],
                             config.k_max, config.curvature_scale,
                             config.model.pad_shape)
    inner_t, outer_t = synthdata.load_template(config.data_dir)
    ctx = TemplateContext.build([(inner_t, outer_t)])

    model = init_model(config)
    opt_cnn = AdamW(model.feature_params(), config.lr_cnn,
                    (config.beta1, config.beta2), config.weight_decay)
    opt_gnn = AdamW(model.graph_params(), config.lr_gnn,
                    (config.beta1, config.beta2), config.weight_decay)
    weights = config.loss_weights()
    k = config.model.n_classes

    best_path = str(out / "best.ckpt")
    last_path = str(out / "last.ckpt")
    log_rows: list[dict] = []
    best_val = np.inf
    best_epoch = -1
    stop_reason = "epoch cap"
    last_good: dict | None = None

    def snapshot():
        return {name: t.data.copy() for name, t in model.named_params()}

    for epoch in range(config.epochs):
        lr_c = cyclic_lr(epoch, config.lr_cnn,
                         config.lr_cnn * config.max_lr_factor,
                         config.cycle_period)
        lr_g = cyclic_lr(epoch, config.lr_gnn,
                         config.lr_gnn * config.max_lr_factor,
                         config.cycle_period)
        opt_cnn.lr = lr_c
        opt_gnn.lr = lr_g
        order = np.random.Generator(np.random.PCG64(
            _sub_seed(config.seed, 0xE0, epoch))).permutation(
            len(train_scenes))
        ep_loss = ep_vox = ep_mesh = 0.0
        for step, sc_idx in enumerate(order):
            sc = train_scenes[sc_idx]

            def abort(reason):
                if last_good is not None:
                    for name, t in model.named_params():
                        t.data = last_good[name]
                model.save(last_path)
                raise TrainingAborted(
                    f"{reason} at epoch {epoch} step {step}; last good "
                    f"state saved to {last_path}")

            try:
                result = deform(model, sc.intensity, ctx, training=True)
                vox = voxel_loss(result.seg, sc.labels, k)
                mesh = mesh_loss(result.snapshot_tensors, ctx, sc.targets,
                                 weights,
                                 seed=_sub_seed(config.seed, 0x10, epoch,
                                                int(sc_idx)))
            except NumericsError as exc:
                abort(str(exc))
            loss = total_loss(vox, mesh)
            if not np.isfinite(loss.data):
                abort("non-finite loss")
            opt_cnn.zero_grad()
            opt_gnn.zero_grad()
            loss.backward()
            opt_cnn.step()
            opt_gnn.step()
            last_good = snapshot()
            ep_loss += loss.item()
            ep_vox += vox.item()
            ep_mesh += mesh.item()
        n_steps = len(order)
        val = validation_assd(model, val_scenes, ctx, config.val_n_sample,
                              seed=_sub_seed(config.seed, 0x7A))
        row = {"epoch": epoch, "train_loss": ep_loss / n_steps,
               "vox_loss": ep_vox / n_steps, "mesh_loss": ep_mesh / n_steps,
               "val_assd": val, "lr_cnn": lr_c, "lr_gnn": lr_g}
        log_rows.append(row)
        logger.info("epoch %d: loss=%.4f val_assd=%.4f", epoch,
                    row["train_loss"], val)
        if val < best_val:
            best_val = val
            best_epoch = epoch
            model.save(best_path)
        model.save(last_path)
        _write_log(out / "training_log.csv", log_rows)
        if config.target_val_assd is not None \
                and val <= config.target_val_assd:
            stop_reason = "validation target reached"
            break
        if epoch - best_epoch >= config.patience \
                and epoch + 1 >= config.min_epochs:
            stop_reason = "validation plateau"
            break
        if config.max_seconds is not None \
                and time.monotonic() - t_start > config.max_seconds:
            stop_reason = "time budget"
            break
    if best_epoch < 0:
        model.save(best_path)
    return TrainResult(best_ckpt=best_path, last_ckpt=last_path,
                       log_rows=log_rows, best_val_assd=float(best_val),
                       stop_reason=stop_reason)


def _write_log(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({f: r[f] for f in LOG_FIELDS})


# ---------------------------------------------------------------------------
# inference and evaluation


@dataclass
class InferenceOutput:
    surfaces: list                   # final meshes with parcels attached
    snapshots: list
    seg_probs: np.ndarray
    seg_labels: np.ndarray
    thickness: np.ndarray


def infer(model: DeformationModel, volume: FeatureVolume,
          ctx: TemplateContext) -> InferenceOutput:
    """Deterministic eval-mode inference; template parcel labels transfer
    to the outputs by vertex-index correspondence."""
    if model.config.pad_shape is not None:
        volume = pad_to(volume, model.config.pad_shape)
    with ad.no_grad():
        result = deform(model, volume, ctx, training=False)
    surfaces = []
    for mesh, tmpl in zip(result.surface_set.surfaces, ctx.meshes):
        if "parcel" in tmpl.vertex_attrs:
            mesh = mesh.with_attrs(parcel=tmpl.vertex_attrs["parcel"])
        surfaces.append(mesh)
    probs = result.seg.probs.data
    thickness = metrics.cortical_thickness(surfaces[0], surfaces[1])
    return InferenceOutput(surfaces=surfaces,
                           snapshots=result.surface_set.snapshots,
                           seg_probs=probs,
                           seg_labels=probs.argmax(axis=0),
                           thickness=thickness)


def evaluate_scene(subject: str, pred_inner, pred_outer, gt_inner, gt_outer,
                   n_sample: int = 10_000, seed: int = 0,
                   dice_labels: bool = True) -> metrics.EvalReport:
    """Full per-scene report: ASSD/HD90/SIF per surface, cross-surface IF,
    parcellation Dice on central surfaces, thickness statistics."""
    rep = metrics.EvalReport(subject=subject)
    for name, pm, gm in (("inner", pred_inner, gt_inner),
                         ("outer", pred_outer, gt_outer)):
        sif, _ = metrics.count_self_intersections(pm)
        a, h = metrics.surface_distances(pm, gm, n=n_sample, seed=seed)
        rep.add_surface(name, assd=a, hd90=h, sif_fraction=sif)
    if_count, if_fraction = metrics.count_surface_intersections(pred_inner,
                                                                pred_outer)
    rep.cross["if_count"] = if_count
    rep.cross["if_fraction"] = if_fraction
    thick_pred = metrics.cortical_thickness(pred_inner, pred_outer)
    thick_gt = metrics.cortical_thickness(gt_inner, gt_outer)
    rep.cross["thickness_mean"] = float(thick_pred.mean())
    rep.cross["thickness_gt_mean"] = float(thick_gt.mean())
    rep.cross["thickness_mae"] = float(np.abs(thick_pred - thick_gt).mean()) \
        if len(thick_pred) == len(thick_gt) else float("nan")
    if dice_labels and "parcel" in pred_inner.vertex_attrs \
            and "parcel" in gt_inner.vertex_attrs:
        pred_central = metrics.central_surface(pred_inner, pred_outer) \
            .with_attrs(parcel=pred_inner.vertex_attrs["parcel"])
        gt_central = metrics.central_surface(gt_inner, gt_outer) \
            .with_attrs(parcel=gt_inner.vertex_attrs["parcel"])
        _, weighted = metrics.parcellation_dice(pred_central, gt_central)
        rep.cross["dice_weighted"] = weighted
    return rep
