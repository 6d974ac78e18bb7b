"""Command-line surface: dataset generation, training, inference,
evaluation.

Exit codes are a stable scripting contract: 0 success, 2 usage error,
1 I/O failure, 3 numeric abort during training, 4 template/checkpoint
incompatibility.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, meshio, metrics, pipeline, synthdata
from .graphdef import DeformationModel, ModelConfig, TemplateContext
from .meshcore import MeshError
from .pipeline import TrainConfig, TrainingAborted
from .voxgrid import FeatureVolume, read_rvol, write_rvol

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_INCOMPATIBLE = 4


# ---------------------------------------------------------------------------
# config files: UTF-8 key=value lines with dotted sections; '#' comments


def parse_config_file(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, val = line.split("=", 1)
            out[key.strip()] = _parse_value(val.strip())
    return out


def _parse_value(text: str):
    if "," in text:
        return tuple(_parse_value(t.strip()) for t in text.split(","))
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def write_resolved_config(out_dir, resolved: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"tool.version={__version__}"]
    for key in sorted(resolved):
        val = resolved[key]
        if isinstance(val, (tuple, list)):
            val = ",".join(str(v) for v in val)
        lines.append(f"{key}={val}")
    (out_dir / "config_resolved.cfg").write_text("\n".join(lines) + "\n",
                                                 encoding="utf-8")


def _apply_config(cfg: TrainConfig, entries: dict) -> TrainConfig:
    tc_fields = {f.name for f in dataclasses.fields(TrainConfig)} - {"model"}
    mc_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    for key, val in entries.items():
        section, _, name = key.partition(".")
        if section == "train" and name in tc_fields:
            setattr(cfg, name, val)
        elif section == "model" and name in mc_fields:
            if name == "unet_channels" and not isinstance(val, tuple):
                val = (val,)
            setattr(cfg.model, name, val)
        else:
            raise KeyError(f"unknown config key {key!r}")
    return cfg


def _resolved_dict(cfg: TrainConfig) -> dict:
    out = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name == "model":
            continue
        out[f"train.{f.name}"] = getattr(cfg, f.name)
    for f in dataclasses.fields(ModelConfig):
        out[f"model.{f.name}"] = getattr(cfg.model, f.name)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    spec_overrides = {}
    if args.subdivisions is not None:
        spec_overrides["subdivisions"] = args.subdivisions
    # keep the 64 mm field of view regardless of grid resolution so the
    # surfaces always fit inside the volume
    spacing = args.spacing if args.spacing is not None else 64.0 / args.grid
    spec_overrides["spacing"] = spacing
    synthdata.generate_dataset(args.out, args.n_train, args.n_val,
                               args.n_test, grid=args.grid, seed=args.seed,
                               spec_overrides=spec_overrides)
    write_resolved_config(args.out, {
        "gen.n_train": args.n_train, "gen.n_val": args.n_val,
        "gen.n_test": args.n_test, "gen.grid": args.grid,
        "gen.spacing": spacing, "gen.seed": args.seed})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = TrainConfig(data_dir=args.data, out_dir=args.out)
    if args.paper_preset:
        cfg = pipeline.paper_preset(cfg)
    if args.config:
        entries = parse_config_file(args.config)
        _apply_config(cfg, entries)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.max_seconds is not None:
        cfg.max_seconds = args.max_seconds
    write_resolved_config(args.out, _resolved_dict(cfg))
    result = pipeline.train(cfg)
    print(f"training done: {result.stop_reason}, best val ASSD "
          f"{result.best_val_assd:.4f} mm -> {result.best_ckpt}")
    return EXIT_OK


def _load_template_ctx(template_dir) -> TemplateContext:
    inner, outer = synthdata.load_template(Path(template_dir).parent
                                           if Path(template_dir).name
                                           == "template"
                                           else Path(template_dir))
    return TemplateContext.build([(inner, outer)])


def cmd_infer(args) -> int:
    model = DeformationModel.load(args.ckpt)
    vol_path = Path(args.volume)
    if vol_path.is_dir():
        vol_path = vol_path / "intensity.rvol"
    volume = read_rvol(vol_path)
    try:
        ctx = _load_template_ctx(args.template)
        out = pipeline.infer(model, volume, ctx)
    except (MeshError, ValueError) as exc:
        print(f"error: incompatible template/checkpoint: {exc}",
              file=sys.stderr)
        return EXIT_INCOMPATIBLE
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    meshio.write_obj(dest / "inner.obj", out.surfaces[0])
    meshio.write_obj(dest / "outer.obj", out.surfaces[1])
    meshio.write_vertex_csv(dest / "labels.csv",
                            out.surfaces[0].vertex_attrs["parcel"],
                            header="vertex_id,parcel")
    meshio.write_vertex_csv(dest / "thickness.csv", out.thickness,
                            header="vertex_id,thickness_mm")
    write_rvol(dest / "seg.rvol",
               FeatureVolume(out.seg_probs.astype(np.float32),
                             volume.spacing, volume.origin))
    write_resolved_config(dest, {"infer.ckpt": args.ckpt,
                                 "infer.volume": str(vol_path),
                                 "infer.template": args.template})
    return EXIT_OK


def _load_pred(pred_dir):
    d = Path(pred_dir)
    inner = meshio.read_obj(d / "inner.obj")
    outer = meshio.read_obj(d / "outer.obj")
    labels_path = d / "labels.csv"
    if labels_path.exists():
        parcels = meshio.read_vertex_csv(labels_path, dtype=np.int64)
        inner = inner.with_attrs(parcel=parcels)
        outer = outer.with_attrs(parcel=parcels)
    return inner, outer


def _load_gt(gt_dir):
    d = Path(gt_dir)
    loaded = synthdata.load_scene(d)
    parcels = synthdata.octant_parcels(loaded.meta["subdivisions"])
    return (loaded.inner.with_attrs(parcel=parcels),
            loaded.outer.with_attrs(parcel=parcels))


def cmd_eval(args) -> int:
    pred_root = Path(args.pred_dir)
    gt_root = Path(args.gt_dir)
    if (pred_root / "inner.obj").exists():
        pairs = [(pred_root.name or "subject", pred_root, gt_root)]
    else:
        pairs = []
        for sub in sorted(p for p in pred_root.iterdir() if p.is_dir()):
            gt = gt_root / sub.name if (gt_root / sub.name).exists() \
                else gt_root
            if (sub / "inner.obj").exists():
                pairs.append((sub.name, sub, gt))
        if not pairs:
            print(f"error: no predictions under {pred_root}",
                  file=sys.stderr)
            return EXIT_IO
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    reports = []
    preds = []
    for name, pdir, gdir in pairs:
        pred_inner, pred_outer = _load_pred(pdir)
        gt_inner, gt_outer = _load_gt(gdir)
        preds.append((pred_inner, pred_outer))
        reports.append(pipeline.evaluate_scene(
            name, pred_inner, pred_outer, gt_inner, gt_outer,
            n_sample=args.n_sample, seed=args.seed))
    payload = {"subjects": [r.to_dict() for r in reports]}
    if args.retest and len(preds) >= 2:
        pos_rmsd = metrics.rmsd_consistency([p[0] for p in preds])
        thick = [metrics.cortical_thickness(pi, po) for pi, po in preds]
        thick_rmsd = metrics.rmsd_consistency(thick)
        payload["retest"] = {
            "position_rmsd_median": float(np.median(pos_rmsd)),
            "thickness_rmsd_median": float(np.median(thick_rmsd)),
        }
    with open(dest / "report.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    metrics.write_report_csv(dest / "report.csv", reports)
    write_resolved_config(dest, {"eval.pred_dir": str(pred_root),
                                 "eval.gt_dir": str(gt_root),
                                 "eval.n_sample": args.n_sample,
                                 "eval.seed": args.seed,
                                 "eval.retest": args.retest})
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshflow",
        description="Template-mesh surface reconstruction from 3D volumes "
                    "via graph neural ODEs (synthetic desk-scale pipeline).")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    g = subs.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=50)
    g.add_argument("--n-val", type=int, default=5)
    g.add_argument("--n-test", type=int, default=10)
    g.add_argument("--grid", type=int, default=64)
    g.add_argument("--spacing", type=float, default=None,
                   help="voxel size in mm (default keeps a 64 mm field "
                        "of view)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--subdivisions", type=int, default=None)
    g.set_defaults(func=cmd_gen_data)

    t = subs.add_parser("train", help="train on a generated corpus")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--max-seconds", type=float, default=None)
    t.add_argument("--paper-preset", action="store_true",
                   help="full-scale architecture and loss constants")
    t.set_defaults(func=cmd_train)

    i = subs.add_parser("infer", help="reconstruct surfaces for one volume")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--volume", required=True,
                   help="intensity RVOL file or a scene directory")
    i.add_argument("--template", required=True,
                   help="dataset root or its template/ directory")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = subs.add_parser("eval", help="evaluate predictions against ground "
                                     "truth")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--gt-dir", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--n-sample", type=int, default=10_000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--retest", action="store_true",
                   help="treat predictions as repeated scans of one scene "
                        "and report RMSD consistency")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen-data" and args.grid < 8:
        parser.error(f"--grid must be >= 8, got {args.grid}")
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (KeyError, synthdata.GapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
