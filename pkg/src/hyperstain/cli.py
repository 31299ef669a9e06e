"""Command-line front end: synth, preprocess, train, stain, eval."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .errors import HyperstainError
from .evalsuite import run_calibration_eval, run_loo_eval
from .imxp import read_imxp, read_manifest, write_imxp, write_manifest
from .markers import MarkerSet
from .preprocess import PanelPreprocessor, center_crop
from .synthcohort import CohortSpec, generate_cohort
from .trainer import (CohortData, TrainConfig, load_checkpoint, restore_state,
                      save_checkpoint, train)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hyperstain",
        description="Masked-autoencoder virtual staining for multiplex images")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--spec", default="default",
                   help="JSON cohort spec, or 'default' for the built-in one")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("preprocess", help="normalize a cohort in place")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cofactor", type=float, default=5.0)
    p.add_argument("--butter-order", type=int, default=2)
    p.add_argument("--butter-cutoff", type=float, default=0.25)

    p = sub.add_parser("train", help="run masked-modelling training")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None,
                   help="JSON training config (defaults to the tiny preset)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None)

    p = sub.add_parser("stain", help="virtually stain target markers")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--targets", required=True,
                   help="comma-separated marker names")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="run LOO staining / calibration reports")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--loo", action="store_true")
    p.add_argument("--calibration", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-images", type=int, default=None)
    return parser


def _cmd_synth(args):
    if args.spec == "default":
        spec = CohortSpec()
    else:
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec = CohortSpec.from_dict(json.load(fh))
    paths = generate_cohort(spec, args.out, seed=args.seed)
    print(f"wrote {len(paths)} images under {args.out}")
    return 0


def _cmd_preprocess(args):
    vocab, panels = read_manifest(os.path.join(args.in_dir, "manifest.txt"))
    src = os.path.join(args.in_dir, "images")
    if not os.path.isdir(src):
        src = args.in_dir
    dst = os.path.join(args.out, "images")
    os.makedirs(dst, exist_ok=True)
    write_manifest(os.path.join(args.out, "manifest.txt"), vocab, panels)

    groups = {}
    for fn in sorted(os.listdir(src)):
        if not fn.endswith(".imxp"):
            continue
        data, names = read_imxp(os.path.join(src, fn))
        groups.setdefault(tuple(names), []).append((fn, data))
    count = 0
    for names, members in groups.items():
        prep = PanelPreprocessor(cofactor=args.cofactor,
                                 butter_order=args.butter_order,
                                 butter_cutoff=args.butter_cutoff)
        prep.fit([data for _, data in members])
        for fn, data in members:
            write_imxp(os.path.join(dst, fn),
                       prep.transform(data).astype(np.float32), list(names))
            count += 1
    print(f"preprocessed {count} images into {args.out}")
    return 0


def _cmd_train(args):
    dataset = CohortData.load(args.data)
    if args.config is None:
        cfg = TrainConfig()
    else:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = TrainConfig.from_dict(json.load(fh))
    if args.seed is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    result = train(cfg, dataset, resume_from=args.resume,
                   log=lambda e: print(
                       f"epoch {e['epoch']:3d}  nll {e['nll']:+.4f}  "
                       f"mae {e['mae']:.4f}  mse {e['mse']:.4f}"))
    save_checkpoint(result.to_checkpoint(), args.out)
    print(f"saved checkpoint to {args.out}")
    return 0


def _cmd_stain(args):
    model, _, _ = restore_state(load_checkpoint(args.ckpt))
    data, names = read_imxp(args.image)
    in_set = model.vocab.set_of(names)
    factor = model.config.total_downsample
    side_h = (data.shape[1] // factor) * factor
    side_w = (data.shape[2] // factor) * factor
    if side_h != data.shape[1] or side_w != data.shape[2]:
        data = center_crop(data, min(side_h, side_w))
    targets = [t.strip() for t in args.targets.split(",") if t.strip()]
    tgt_set = model.vocab.set_of(targets)
    pred = model.decode(model.encode(data, in_set), tgt_set)
    out = np.concatenate([pred.mean.data, pred.log_var.data], axis=0)
    out_names = [f"{t}:mu" for t in targets] + [f"{t}:logvar" for t in targets]
    write_imxp(args.out, out, out_names)
    print(f"stained {len(targets)} markers -> {args.out}")
    return 0


def _write_rows(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "marker", "split", "mse", "mae", "mean_var"])
        for r in rows:
            writer.writerow([r.image_id, r.marker, r.split,
                             f"{r.mse:.8g}", f"{r.mae:.8g}", f"{r.mean_var:.8g}"])


def _cmd_eval(args):
    model, _, cfg = restore_state(load_checkpoint(args.ckpt))
    dataset = CohortData.load(args.data)
    os.makedirs(args.report, exist_ok=True)
    do_loo = args.loo or not (args.loo or args.calibration)
    do_cal = args.calibration or not (args.loo or args.calibration)
    summary = {}
    if do_loo:
        rows = run_loo_eval(model, dataset, max_images=args.max_images)
        _write_rows(os.path.join(args.report, "loo.csv"), rows)
        summary["loo_mean_mse"] = float(np.mean([r.mse for r in rows]))
        summary["loo_mean_mae"] = float(np.mean([r.mae for r in rows]))
        summary["loo_rows"] = len(rows)
    if do_cal:
        rows, report = run_calibration_eval(
            model, dataset, cfg.mask, seed=args.seed, max_images=args.max_images)
        _write_rows(os.path.join(args.report, "calibration.csv"), rows)
        summary["pearson_r_active"] = report.r_active
        summary["pearson_r_masked"] = report.r_masked
        summary["coverage_z196"] = report.coverage
    with open(os.path.join(args.report, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for key in sorted(summary):
        print(f"{key}: {summary[key]}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "stain": _cmd_stain,
    "eval": _cmd_eval,
}


def run(argv):
    """Parse and dispatch; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (HyperstainError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
