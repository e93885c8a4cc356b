"""Bundle staging and the three export operations.

The exporter writes tensor files incrementally into the bundle directory and
keeps its own `export_state.json`; `manifest.json` is (re)emitted whenever
the bundle is complete, then re-validated through the engine's reader so
every finished export is guaranteed loadable with zero diagnostics.
"""

import json
import os
import sys
from dataclasses import dataclass

import numpy as np
from PIL import Image

from batchad import bundle as engine_bundle

from .capture import preprocess_images, run_vision, shared_weight_arrays
from .prompts import encode_text_groups

STATE_NAME = "export_state.json"

_DTYPE_SIZE = {"f32": 4, "u8": 1}


class ExportError(RuntimeError):
    pass


@dataclass
class ExportPlan:
    images: list                       # (path, class_name, image_id) triples
    image_size: int = 518
    stage_layers: tuple = ()           # empty = evenly spaced quarters
    inter_attn_layer: int = 0          # 0 = middle layer
    export_qkv: bool = False
    batch_size: int = 4

    def resolve_layers(self, num_layers):
        stages = tuple(self.stage_layers) if self.stage_layers else tuple(
            num_layers * k // 4 for k in (1, 2, 3, 4))
        inter = self.inter_attn_layer or num_layers // 2
        if any(not 1 <= s <= num_layers for s in stages):
            raise ExportError(f"stage layers {stages} outside 1..{num_layers}")
        if any(b <= a for a, b in zip(stages, stages[1:])):
            raise ExportError(f"stage layers must be strictly increasing, got {stages}")
        if not 1 <= inter <= max(stages):
            raise ExportError(
                f"intermediate attention layer {inter} must lie in 1..{max(stages)}")
        return stages, inter


class BundleStaging:
    """Incremental bundle directory with a persisted manifest-shaped state."""

    def __init__(self, path):
        self.path = str(path)
        self.doc = {"geometry": None, "images": [], "tensors": [], "notes": []}
        state = os.path.join(self.path, STATE_NAME)
        if os.path.isfile(state):
            with open(state, "r", encoding="utf-8") as fh:
                self.doc = json.load(fh)

    # -- state ------------------------------------------------------------

    def set_geometry(self, **fields):
        if self.doc["geometry"] is not None and self.doc["geometry"] != fields:
            raise ExportError(
                f"bundle at {self.path} was started with different geometry: "
                f"{self.doc['geometry']} vs {fields}")
        self.doc["geometry"] = fields

    def add_note(self, note):
        self.doc["notes"].append(note)

    def add_tensor(self, name, dtype, arr):
        arr = np.asarray(arr)
        if dtype == "f32":
            arr = arr.astype("<f4", copy=False)
        elif dtype == "u8":
            arr = arr.astype("u1", copy=False)
        else:
            raise ExportError(f"unsupported dtype {dtype!r}")
        rel = name + ".bin"
        fpath = os.path.join(self.path, rel)
        os.makedirs(os.path.dirname(fpath), exist_ok=True)
        with open(fpath, "wb") as fh:
            fh.write(arr.tobytes(order="C"))
        record = {"name": name, "dtype": dtype, "shape": [int(s) for s in arr.shape],
                  "file": rel, "byte_length": int(arr.size) * _DTYPE_SIZE[dtype]}
        self.doc["tensors"] = [t for t in self.doc["tensors"] if t["name"] != name]
        self.doc["tensors"].append(record)

    def upsert_image(self, entry):
        self.doc["images"] = [e for e in self.doc["images"] if e["id"] != entry["id"]]
        self.doc["images"].append(entry)

    def image_entry(self, image_id):
        for e in self.doc["images"]:
            if e["id"] == image_id:
                return e
        raise ExportError(f"no image {image_id!r} staged in {self.path}")

    def save(self):
        os.makedirs(self.path, exist_ok=True)
        with open(os.path.join(self.path, STATE_NAME), "w", encoding="utf-8") as fh:
            json.dump(self.doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    # -- finalization -----------------------------------------------------

    def _is_complete(self):
        if self.doc["geometry"] is None or not self.doc["images"]:
            return False
        names = {t["name"] for t in self.doc["tensors"]}
        return all(n in names for n in engine_bundle.SHARED_TENSORS)

    def finalize_if_complete(self):
        """Emit manifest.json and validate via the engine reader when ready."""
        if not self._is_complete():
            return False
        geo = self.doc["geometry"]
        manifest = {
            "format_version": engine_bundle.FORMAT_VERSION,
            "model_id": geo["model_id"],
            "image_size": geo["image_size"],
            "patch_size": geo["patch_size"],
            "grid": geo["grid"],
            "feature_dim": geo["feature_dim"],
            "embed_dim": geo["embed_dim"],
            "num_heads": geo["num_heads"],
            "stage_layers": geo["stage_layers"],
            "inter_attn_layer": geo["inter_attn_layer"],
            "images": sorted(self.doc["images"], key=lambda e: e["id"]),
            "tensors": sorted(self.doc["tensors"], key=lambda t: t["name"]),
        }
        with open(os.path.join(self.path, engine_bundle.MANIFEST_NAME), "w",
                  encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
        engine_bundle.read_bundle(self.path)
        return True


def export_images(plan, model, out_path, log=print):
    """Run the frozen checkpoint over the planned images and stage the bundle."""
    model.eval()
    vision_cfg = model.config.vision_config
    num_layers = vision_cfg.num_hidden_layers
    stages, inter = plan.resolve_layers(num_layers)
    if plan.image_size % vision_cfg.patch_size != 0:
        raise ExportError(
            f"image size {plan.image_size} not divisible by patch "
            f"{vision_cfg.patch_size}")
    grid = plan.image_size // vision_cfg.patch_size
    interpolate = plan.image_size != vision_cfg.image_size

    staging = BundleStaging(out_path)
    staging.set_geometry(
        model_id=str(getattr(model.config, "name_or_path", "") or "clip"),
        image_size=plan.image_size, patch_size=vision_cfg.patch_size, grid=grid,
        feature_dim=vision_cfg.hidden_size, embed_dim=model.config.projection_dim,
        num_heads=vision_cfg.num_attention_heads, stage_layers=list(stages),
        inter_attn_layer=inter)
    for name, arr in shared_weight_arrays(model).items():
        staging.add_tensor(f"shared/{name}", "f32", arr)

    pending = []
    for path, class_name, image_id in plan.images:
        try:
            img = Image.open(path)
            img.load()
        except Exception as exc:  # decode failure: report, note, skip
            note = f"skipped {path}: {exc}"
            log(f"warning: {note}", file=sys.stderr)
            staging.add_note(note)
            continue
        pending.append((image_id, class_name, img))

    exported = []
    for start in range(0, len(pending), max(1, plan.batch_size)):
        chunk = pending[start:start + max(1, plan.batch_size)]
        pixel_values = preprocess_images([img for _, _, img in chunk], plan.image_size)
        cap = run_vision(model, pixel_values, capture_qkv=plan.export_qkv,
                         interpolate_pos_encoding=interpolate)
        for b, (iid, class_name, _) in enumerate(chunk):
            entry = {"id": iid, "class_name": class_name}
            for layer in stages:
                tname = f"{iid}/tokens_L{layer}"
                staging.add_tensor(tname, "f32",
                                   cap.hidden_states[layer][b, 1:].cpu().numpy())
                entry[f"tokens_L{layer}"] = tname
            staging.add_tensor(f"{iid}/attn_inter", "f32",
                               cap.attentions[inter - 1][b].cpu().numpy())
            entry["attn_inter"] = f"{iid}/attn_inter"
            staging.add_tensor(f"{iid}/v_last", "f32", cap.v_last[b].cpu().numpy())
            entry["v_last"] = f"{iid}/v_last"
            staging.add_tensor(f"{iid}/cls_global", "f32",
                               cap.cls_embedding[b].cpu().numpy())
            entry["cls_global"] = f"{iid}/cls_global"
            if plan.export_qkv:
                staging.add_tensor(f"{iid}/q_last", "f32", cap.q_last[b].cpu().numpy())
                staging.add_tensor(f"{iid}/k_last", "f32", cap.k_last[b].cpu().numpy())
                entry["q_last"] = f"{iid}/q_last"
                entry["k_last"] = f"{iid}/k_last"
            staging.upsert_image(entry)
            exported.append(iid)
    staging.save()
    complete = staging.finalize_if_complete()
    log(f"exported {len(exported)} images -> {out_path}"
        + ("" if complete else " (bundle incomplete: text features still needed)"))
    return exported


def export_text(model, tokenizer, prompt_spec, class_name, out_path, log=print):
    """Encode the prompt ensemble and stage unit-norm text rows."""
    normal, abnormal = prompt_spec.fill(class_name)
    rows = encode_text_groups(model, tokenizer, normal, abnormal)
    staging = BundleStaging(out_path)
    staging.add_tensor("shared/text_feats", "f32", rows)
    staging.save()
    complete = staging.finalize_if_complete()
    log(f"encoded {len(normal)}+{len(abnormal)} prompts -> {out_path}"
        + ("" if complete else " (bundle incomplete: image export still needed)"))
    return rows


def load_mask(path, log=print):
    """Binary u8 mask from an image file; non-binary inputs threshold at 128."""
    img = Image.open(path).convert("L")
    arr = np.asarray(img)
    values = np.unique(arr)
    if not np.isin(values, (0, 255)).all():
        log(f"warning: mask {path} is not binary, thresholding at 128",
            file=sys.stderr)
    return (arr >= 128).astype(np.uint8)


def export_gt(items, out_path, log=print):
    """Stage ground-truth masks/labels for already exported images.

    items: (image_id, mask_path_or_None, label_or_None, (h, w)) tuples;
    a missing mask becomes an all-zero mask of the given shape, and a
    missing label defaults to the any-foreground indicator.
    """
    staging = BundleStaging(out_path)
    for image_id, mask_path, label, shape in items:
        entry = staging.image_entry(image_id)
        mask = (load_mask(mask_path, log=log) if mask_path is not None
                else np.zeros(shape, dtype=np.uint8))
        gt_label = int(label) if label is not None else int(mask.any())
        staging.add_tensor(f"{image_id}/gt_mask", "u8", mask)
        staging.add_tensor(f"{image_id}/gt_label", "u8",
                           np.array(gt_label, dtype=np.uint8))
        entry["gt_mask"] = f"{image_id}/gt_mask"
        entry["gt_label"] = f"{image_id}/gt_label"
        staging.upsert_image(entry)
    staging.save()
    staging.finalize_if_complete()
    log(f"attached ground truth for {len(items)} images -> {out_path}")
