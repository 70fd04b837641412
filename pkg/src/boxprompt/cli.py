"""Command-line entry points.

Subcommands: ``gen`` (synthetic dataset), ``run`` (refinement pipeline),
``metrics`` (score label files against ground truth), ``trace-plot`` (dump
the per-iteration segmenter-change series of a trace as CSV).

Exit codes: 0 success, 1 validation error, 2 partial failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, EmptyMaskError, ValidationError
from .metrics import MetricReport, assd, dice_3d, score_labels
from .pipeline import (
    build_run_config,
    gen_synthetic,
    parse_config_file,
    retrain_toy,
    run_pipeline,
)
from .tensor_io import read_tensor_file
from .validation import check_label_mask


def _add_run_parser(sub):
    run = sub.add_parser("run", help="refine pseudo-labels for a dataset")
    run.add_argument("--config", help="key = value config file")
    run.add_argument("--dataset", dest="dataset_root", help="dataset root directory")
    run.add_argument("--out", dest="output_dir", help="output directory")
    run.add_argument("--backend", help="mock:<seed> or proc:<cmdline>")
    run.add_argument("--jobs", type=int, help="parallel worker count")
    run.add_argument("--profile", choices=("abdominal", "prostate", "custom"))
    run.add_argument("--phases", dest="search_phases",
                     choices=("none", "tbs", "full"),
                     help="argmax baseline, target-feature phase only, or both phases")
    run.add_argument("--no-cp", dest="connectivity_postprocess",
                     action="store_false", default=None,
                     help="skip largest-component post-processing")
    run.add_argument("--retrain", action="store_true", default=None,
                     help="retrain the toy pixel classifier on the refined labels")
    run.add_argument("--retrain-lr", dest="retrain_lr", type=float)
    run.add_argument("--retrain-epochs", dest="retrain_epochs", type=int)


def _cmd_run(args) -> int:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {
        key: getattr(args, key)
        for key in ("dataset_root", "output_dir", "backend", "jobs", "profile",
                    "search_phases", "connectivity_postprocess", "retrain",
                    "retrain_lr", "retrain_epochs")
    }
    cfg = build_run_config(file_values, overrides)
    summary = run_pipeline(cfg)
    print(f"slices: {len(summary.slice_ids)}  failed: {len(summary.failed)}")
    if summary.mean_dice_2d is not None:
        print(f"mean 2D dice: {summary.mean_dice_2d:.4f}")
        print(f"mean 3D dice: {summary.volume_report.mean_dice:.4f}")
    if cfg.retrain and not summary.failed:
        retrain = retrain_toy(cfg.dataset_root, Path(cfg.output_dir) / "labels",
                              Path(cfg.output_dir) / "retrain",
                              learning_rate=cfg.retrain_lr,
                              epochs=cfg.retrain_epochs)
        if "final_dice_vs_gt" in retrain:
            print(f"retrained model dice: {retrain['final_dice_vs_gt']:.4f} "
                  f"(initial {retrain['initial_dice_vs_gt']:.4f})")
    for slice_id, error in summary.failed.items():
        print(f"FAILED {slice_id}: {error}", file=sys.stderr)
    return 0 if summary.ok else 2


def _cmd_gen(args) -> int:
    ids = gen_synthetic(args.out, seed=args.seed, n_slices=args.slices,
                        size=args.size, classes=args.classes,
                        dispersion=args.dispersion)
    print(f"wrote {len(ids)} slices to {args.out}")
    return 0


def _cmd_metrics(args) -> int:
    root = Path(args.dataset)
    labels_dir = Path(args.labels)
    ids = [line.strip() for line in
           (root / "manifest.txt").read_text().splitlines() if line.strip()]
    rows = []
    num_classes = None
    pred_stacks: dict[int, list] = {}
    gt_stacks: dict[int, list] = {}
    for slice_id in ids:
        gt_path = root / "slices" / slice_id / "gt.dfgt"
        if not gt_path.exists():
            raise ConfigError(f"{slice_id}: no ground truth in dataset")
        probs_path = root / "slices" / slice_id / "probs.dfgt"
        num_classes = read_tensor_file(probs_path).shape[2]
        gt = check_label_mask(read_tensor_file(gt_path), num_classes, "gt")
        pred = check_label_mask(read_tensor_file(labels_dir / f"{slice_id}.dfgt"),
                                num_classes, "labels")
        report = score_labels(pred, gt, num_classes)
        for idx, dice in enumerate(report.per_class_dice):
            rows.append((slice_id, idx + 1, dice, report.per_class_assd[idx]))
        for k in range(1, num_classes):
            pred_stacks.setdefault(k, []).append(pred == k)
            gt_stacks.setdefault(k, []).append(gt == k)

    volume = MetricReport()
    for k in range(1, num_classes):
        volume.per_class_dice.append(dice_3d(pred_stacks[k], gt_stacks[k]))
        distances = []
        for p, g in zip(pred_stacks[k], gt_stacks[k]):
            try:
                distances.append(assd(p, g))
            except EmptyMaskError:
                continue
        volume.per_class_assd.append(float(np.mean(distances)) if distances else None)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["slice_id", "class_id", "dice", "assd"])
    for slice_id, class_id, dice, assd_value in rows:
        writer.writerow([slice_id, class_id, f"{dice:.6f}",
                         "" if assd_value is None else f"{assd_value:.6f}"])
    (out / "metrics_2d.csv").write_text(buf.getvalue())
    (out / "metrics_3d.csv").write_text(volume.to_csv())
    print(f"mean 2D dice: {np.mean([r[2] for r in rows]):.4f}")
    print(f"mean 3D dice: {volume.mean_dice:.4f}")
    return 0


def _cmd_trace_plot(args) -> int:
    with open(args.trace, newline="") as handle:
        reader = csv.DictReader(handle)
        series = [(row["iteration"], row["delta_m"]) for row in reader]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iteration", "delta_m"])
    for iteration, delta in series:
        writer.writerow([iteration, delta])
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="boxprompt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic mock dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--slices", type=int, default=20)
    gen.add_argument("--size", type=int, default=64)
    gen.add_argument("--classes", type=int, default=3)
    gen.add_argument("--dispersion", type=float, default=0.0)

    _add_run_parser(sub)

    metrics = sub.add_parser("metrics", help="score label files against ground truth")
    metrics.add_argument("--dataset", required=True)
    metrics.add_argument("--labels", required=True)
    metrics.add_argument("--out", required=True)

    trace = sub.add_parser("trace-plot", help="extract the delta series from a trace CSV")
    trace.add_argument("--trace", required=True)
    trace.add_argument("--out")

    args = parser.parse_args(argv)
    handlers = {"gen": _cmd_gen, "run": _cmd_run, "metrics": _cmd_metrics,
                "trace-plot": _cmd_trace_plot}
    try:
        return handlers[args.command](args)
    except (ConfigError, ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
