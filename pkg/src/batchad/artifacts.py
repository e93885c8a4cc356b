"""Score-run artifacts: a scores manifest plus one raw f32 map per image,
and grayscale PGM heatmap emission."""

import json
import os
import re

import numpy as np

from .errors import ManifestError, TensorDataError

SCORES_NAME = "scores.json"
MAPS_DIR = "maps"


def _safe_name(idx, image_id):
    return f"{idx:04d}_{re.sub(r'[^A-Za-z0-9._-]', '_', image_id)}"


def write_scores(out_dir, results, config_resolved, bundle_path):
    """Write pixel maps (raw little-endian f32) and the scores manifest."""
    os.makedirs(os.path.join(out_dir, MAPS_DIR), exist_ok=True)
    images = []
    for idx, res in enumerate(results):
        rel = os.path.join(MAPS_DIR, _safe_name(idx, res.id) + ".bin")
        arr = np.ascontiguousarray(res.pixel_map, dtype="<f4")
        with open(os.path.join(out_dir, rel), "wb") as fh:
            fh.write(arr.tobytes())
        images.append({
            "id": res.id,
            "class_name": res.class_name,
            "image_score": float(res.image_score),
            "cls_score": float(res.cls_score),
            "map_file": rel.replace(os.sep, "/"),
            "map_shape": [int(s) for s in res.pixel_map.shape],
        })
    doc = {
        "format_version": 1,
        "bundle_path": str(bundle_path),
        "config": config_resolved,
        "images": images,
    }
    with open(os.path.join(out_dir, SCORES_NAME), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_scores(path):
    """Load a scores manifest; map data stays on disk until load_map."""
    spath = os.path.join(path, SCORES_NAME)
    if not os.path.isfile(spath):
        raise ManifestError(f"no {SCORES_NAME} under {path}")
    with open(spath, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"scores manifest is not valid JSON: {exc}") from exc
    for key in ("format_version", "config", "images"):
        if key not in doc:
            raise ManifestError(f"scores manifest lacks {key!r}")
    return doc


def load_map(scores_dir, image_entry):
    """Read one pixel map back from a scores directory."""
    fpath = os.path.join(scores_dir, image_entry["map_file"])
    shape = tuple(image_entry["map_shape"])
    expected = int(np.prod(shape)) * 4
    if not os.path.isfile(fpath):
        raise TensorDataError(image_entry["map_file"], "map file missing")
    size = os.path.getsize(fpath)
    if size != expected:
        raise TensorDataError(
            image_entry["map_file"], f"holds {size} bytes, {expected} expected")
    with open(fpath, "rb") as fh:
        return np.frombuffer(fh.read(), dtype="<f4").reshape(shape)


def write_pgm(path, arr):
    """Emit a map as a binary P5 PGM, min-max normalized to [0,255].

    A constant map normalizes to all zeros.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ManifestError(f"heatmaps must be 2-D, got shape {arr.shape}")
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        scaled = np.rint((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        scaled = np.zeros(arr.shape, dtype=np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(scaled.tobytes())
