"""Command line entry point: ``coarse3d generate|subsample|train|eval``.

Exit codes: 0 on success, 1 on usage errors (bad flags, unknown config keys,
missing config file), 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import fields

import numpy as np

from .config import ENV_SEED, TrainConfig, format_value, load_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("coarse3d")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_help() -> str:
    lines = ["config keys (file `key = value` or --override key=value) and defaults:"]
    default = TrainConfig()
    for f in fields(TrainConfig):
        lines.append(f"  {f.name} = {format_value(getattr(default, f.name))}")
    return "\n".join(lines)


def _load(path, overrides, **extra) -> TrainConfig:
    try:
        return load_config(path, overrides, **extra)
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _seed(value):
    if value is not None:
        return value
    env = os.environ.get(ENV_SEED, "").strip()
    return int(env) if env else 0


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    from .synthetic import SceneSpec, export_dataset

    if args.scenes < 0:
        raise UsageError("--scenes must be >= 0")
    from .training import scene_base

    cfg = _load(args.config, args.override)
    base = scene_base(cfg)
    base = SceneSpec(**{**base.__dict__, "seed": _seed(args.seed)})
    base.validate(max_classes=cfg.n_classes)
    manifest = export_dataset(args.out, base, args.scenes)
    print(f"wrote {len(manifest['files'])} scenes to {args.out}")
    return EXIT_OK


def cmd_subsample(args) -> int:
    from .pointcloud_io import load_labels, load_remap, load_scan, write_labels
    from .weak_supervision import propagate_voxel_labels, subsample_labels
    from .training import _SUBSAMPLE, _VOXEL, derive_seed

    with open(os.path.join(args.data, "manifest.json")) as fh:
        manifest = json.load(fh)
    remap = load_remap(os.path.join(args.data, manifest["remap"])) if manifest.get("remap") else None
    seed = _seed(args.seed)
    n_classes = 0
    total = 0
    for i, entry in enumerate(manifest["files"]):
        cloud = load_scan(os.path.join(args.data, entry["scan"]))
        dense = load_labels(os.path.join(args.data, entry["label"]), len(cloud), remap)
        mask = subsample_labels(dense, args.ratio, derive_seed(seed, i, _SUBSAMPLE))
        if args.propagate:
            mask = propagate_voxel_labels(cloud, mask, args.voxel_size, derive_seed(seed, i, _VOXEL))
        out = os.path.join(args.out, os.path.relpath(os.path.join(args.data, entry["label"]), args.data))
        os.makedirs(os.path.dirname(out), exist_ok=True)
        # raw id 0 marks unlabelled points, class c is stored as c + 1
        write_labels(out, (mask.labels + 1).astype(np.uint32))
        n_classes = max(n_classes, int(dense.max()) + 1 if dense.size else 0)
        total += mask.n_labelled
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "remap.txt"), "w") as fh:
        fh.write("0 -1\n")
        for c in range(n_classes):
            fh.write(f"{c + 1} {c}\n")
    print(f"kept {total} labelled points over {len(manifest['files'])} scans in {args.out}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    extra = {}
    if args.ratio is not None:
        extra["annotation_ratio"] = args.ratio
    if args.no_contrast:
        extra["lambda_nce"] = 0.0
    if args.data is not None:
        extra["data_dir"] = args.data
    if args.seed is not None:
        extra["seed"] = args.seed
    return _load(args.config, args.override, **extra)


def cmd_train(args) -> int:
    from .training import run_experiment

    cfg = _train_config(args)
    result = run_experiment(cfg, out_dir=args.out)
    report = result["report"]
    print(f"final val mIoU {report.miou:.4f}; run directory {args.out}")
    return EXIT_OK


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def cmd_eval(args) -> int:
    from .training import build_datasets, evaluate, load_checkpoint, read_metrics

    cfg, model, _head, _bank, header = load_checkpoint(args.checkpoint)
    _, val = build_datasets(cfg) if cfg.val_fraction > 0 else (None, None)
    frames = val if val else build_datasets(cfg)[0]
    report = evaluate(model, frames, cfg)
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out, exist_ok=True)
    _write_csv(
        os.path.join(out, "iou.csv"),
        ["class", "iou"],
        [[k, _fmt(v)] for k, v in enumerate(report.iou)] + [["mean", _fmt(report.miou)]],
    )
    metrics = args.metrics or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "metrics.jsonl")
    if os.path.isfile(metrics):
        records = read_metrics(metrics)
        val_rows = [[r["epoch"], _fmt(r["miou"])] for r in records if r["split"] == "val"]
        _write_csv(os.path.join(out, "curve_miou.csv"), ["epoch", "miou"], val_rows)
        terms = ("focal", "lovasz", "nce", "total")
        loss_rows = [[r["epoch"]] + [_fmt(r[t]) for t in terms] for r in records if r["split"] == "train"]
        _write_csv(os.path.join(out, "curve_loss.csv"), ["epoch", *terms], loss_rows)
    else:
        log.warning("no metrics file at %s; skipping curve files", metrics)
    print(f"epoch {header['epoch']}: val mIoU {report.miou:.4f}; tables in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coarse3d", description="Weakly supervised range-image segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser(
        "generate",
        help="write a synthetic dataset in SemanticKITTI layout",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    g.add_argument("--scenes", type=int, default=10, help="number of scenes (default 10)")
    g.add_argument("--seed", type=int, default=None, help=f"dataset seed (default ${ENV_SEED} or 0)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--config", default=None, help="config file for the scene geometry keys")
    g.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("subsample", help="write sparse label files for an exported dataset")
    s.add_argument("--data", required=True, help="dataset directory with manifest.json")
    s.add_argument("--out", required=True, help="output directory for the weak labels")
    s.add_argument("--ratio", type=float, default=0.001, help="fraction of labelled points (default 0.001)")
    s.add_argument("--seed", type=int, default=None, help=f"sampling seed (default ${ENV_SEED} or 0)")
    s.add_argument("--propagate", action="store_true", help="also spread labels inside voxels")
    s.add_argument("--voxel-size", type=float, default=0.06, help="voxel edge in metres (default 0.06)")
    s.set_defaults(func=cmd_subsample)

    t = sub.add_parser(
        "train",
        help="train and evaluate one configuration",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    t.add_argument("--config", default=None, help="key = value config file")
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="wins over the file")
    t.add_argument("--ratio", type=float, default=None, help="annotation_ratio")
    t.add_argument("--no-contrast", action="store_true", help="baseline without the contrastive term (lambda_nce = 0)")
    t.add_argument("--data", default=None, help="data_dir (default: synthetic scenes in memory)")
    t.add_argument("--seed", type=int, default=None, help=f"seed (default ${ENV_SEED} or 0)")
    t.add_argument("--out", required=True, help="run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint and export IoU and curve tables")
    e.add_argument("checkpoint")
    e.add_argument("--out", default=None, help="output directory (default: checkpoint directory)")
    e.add_argument("--metrics", default=None, help="metrics.jsonl for the curves (default: next to checkpoint)")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"coarse3d: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"coarse3d: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
