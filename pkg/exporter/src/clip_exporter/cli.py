"""Exporter CLI: export-images / export-text / export-gt."""

import argparse
import os
import re
import sys

from PIL import Image

from .datasets import dataset_image_id, scan_test_split
from .export import BundleStaging, ExportError, ExportPlan, export_gt, export_images, export_text
from .prompts import load_prompt_spec


def _load_model(checkpoint):
    import torch
    from transformers import CLIPModel

    torch.manual_seed(0)
    model = CLIPModel.from_pretrained(checkpoint, attn_implementation="eager")
    model.eval()
    return model


def _load_tokenizer(checkpoint):
    from transformers import AutoTokenizer

    return AutoTokenizer.from_pretrained(checkpoint)


def _planned_images(args):
    if args.dataset:
        found = scan_test_split(args.dataset, args.category)
        if args.limit:
            found = found[: args.limit]
        return [(img.path, img.class_name, dataset_image_id(img)) for img in found]
    if not args.images or not args.class_name:
        raise ExportError("either --dataset/--category or --images/--class-name required")
    cls = re.sub(r"[^A-Za-z0-9._-]", "_", args.class_name)
    return [(p, args.class_name,
             f"{cls}/{idx:04d}_" + re.sub(r"[^A-Za-z0-9._-]", "_",
                                          os.path.splitext(os.path.basename(p))[0]))
            for idx, p in enumerate(args.images)]


def cmd_export_images(args):
    plan = ExportPlan(
        images=_planned_images(args),
        image_size=args.image_size,
        stage_layers=tuple(int(t) for t in re.split(r"[,\s]+", args.stage_layers) if t)
        if args.stage_layers else (),
        inter_attn_layer=args.inter_layer,
        export_qkv=args.export_qkv,
        batch_size=args.batch_size)
    export_images(plan, _load_model(args.checkpoint), args.out)
    return 0


def cmd_export_text(args):
    spec = load_prompt_spec(args.prompts)
    export_text(_load_model(args.checkpoint), _load_tokenizer(args.checkpoint),
                spec, args.class_name, args.bundle)
    return 0


def cmd_export_gt(args):
    staging = BundleStaging(args.bundle)
    items = []
    if args.dataset:
        found = scan_test_split(args.dataset, args.category)
        if args.limit:
            found = found[: args.limit]
        staged = {e["id"] for e in staging.doc["images"]}
        for img in found:
            iid = dataset_image_id(img)
            if iid not in staged:
                continue
            with Image.open(img.path) as im:
                shape = (im.height, im.width)
            items.append((iid, img.mask_path, img.label, shape))
    else:
        raise ExportError("--dataset/--category required for export-gt")
    export_gt(items, args.bundle)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="clip-export",
        description="One-time CLIP feature export into engine-readable bundles")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export-images", help="run the checkpoint and dump features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--category", default=None)
    p.add_argument("--images", nargs="*", default=None)
    p.add_argument("--class-name", default=None)
    p.add_argument("--image-size", type=int, default=518)
    p.add_argument("--stage-layers", default="")
    p.add_argument("--inter-layer", type=int, default=0)
    p.add_argument("--export-qkv", action="store_true")
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_export_images)

    p = sub.add_parser("export-text", help="encode the prompt ensemble")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--class-name", required=True)
    p.add_argument("--prompts", default=None)
    p.set_defaults(func=cmd_export_text)

    p = sub.add_parser("export-gt", help="attach ground-truth masks and labels")
    p.add_argument("--bundle", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_export_gt)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
