"""Command-line entry point: score / eval / synth / heatmap.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 undefined metric.
"""

import argparse
import os
import sys
import warnings

import numpy as np

from . import artifacts, bundle as B, metrics, pipeline, synth
from .config import load_config
from .errors import EngineError, UndefinedMetricError


def cmd_score(args):
    cfg = load_config(args.config)
    bundle = B.read_bundle(args.bundle)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        results = pipeline.score_bundle(bundle, cfg)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    artifacts.write_scores(args.out, results, cfg.resolved(), args.bundle)
    print(f"scored {len(results)} images -> {args.out}")
    return 0


def cmd_eval(args):
    scores = artifacts.read_scores(args.scores)
    bundle = B.read_bundle(args.bundle)
    by_id = {img["id"]: img for img in scores["images"]}

    labeled = [e for e in bundle.manifest.images if e.gt_label is not None]
    masked = [e for e in bundle.manifest.images if e.gt_mask is not None]
    if not labeled and not masked:
        raise UndefinedMetricError("bundle carries no ground truth")
    absent = sorted(e.id for e in labeled + masked if e.id not in by_id)
    if absent:
        raise UndefinedMetricError(
            f"scores missing for images with ground truth: {', '.join(absent)}")

    report = {}
    if labeled:
        y = [int(bundle.load(e.gt_label)) for e in labeled]
        s = [by_id[e.id]["image_score"] for e in labeled]
        report["image_auroc"] = metrics.auroc(s, y)
        report["image_f1max"] = metrics.f1max(s, y)
        report["image_ap"] = metrics.ap(s, y)
    if masked:
        maps, gts = [], []
        for e in masked:
            gt = bundle.load(e.gt_mask)
            m = artifacts.load_map(args.scores, by_id[e.id])
            if m.shape != gt.shape:
                raise UndefinedMetricError(
                    f"map for {e.id} has shape {m.shape}, ground truth {gt.shape}")
            maps.append(m)
            gts.append(gt)
        flat_s = np.concatenate([m.ravel() for m in maps])
        flat_y = np.concatenate([g.ravel() for g in gts])
        report["pixel_auroc"] = metrics.auroc(flat_s, flat_y)
        report["pixel_f1max"] = metrics.f1max(flat_s, flat_y)
        report["pixel_ap"] = metrics.ap(flat_s, flat_y)
        report["pixel_aupro"] = metrics.aupro(
            maps, gts, fpr_cap=float(scores["config"].get("fpr_cap", 0.3)))

    text = metrics.report_text(report)
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return 0


def cmd_synth(args):
    manifest, tensors = synth.build(
        seed=args.seed, n_images=args.images, grid=args.grid, dim=args.dim,
        anomaly_frac=args.anomaly_frac, offset=args.offset)
    B.write_bundle(manifest, tensors, args.out)
    print(f"wrote synthetic bundle with {args.images} images -> {args.out}")
    return 0


def cmd_heatmap(args):
    scores = artifacts.read_scores(args.scores)
    os.makedirs(args.out, exist_ok=True)
    for idx, img in enumerate(scores["images"]):
        arr = artifacts.load_map(args.scores, img)
        name = os.path.splitext(os.path.basename(img["map_file"]))[0] + ".pgm"
        artifacts.write_pgm(os.path.join(args.out, name), arr)
    print(f"wrote {len(scores['images'])} heatmaps -> {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="batchad",
        description="Batch zero-shot anomaly scoring over exported feature bundles")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score a feature bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="evaluate scores against ground truth")
    p.add_argument("--scores", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic bundle")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--anomaly-frac", type=float, default=0.5)
    p.add_argument("--offset", type=float, default=3.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("heatmap", help="emit PGM heatmaps from score maps")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UndefinedMetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
