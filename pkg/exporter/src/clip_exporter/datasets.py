"""MVTec-style dataset layout: class/split/defect-type/image with
ground-truth masks alongside under ground_truth/defect-type/."""

import os
import re
from dataclasses import dataclass

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def _sanitize(name):
    return re.sub(r"[^A-Za-z0-9._-]", "_", name)


def dataset_image_id(img):
    """Stable unique id: class/defect-type_stem."""
    stem = os.path.splitext(os.path.basename(img.path))[0]
    return f"{_sanitize(img.class_name)}/{_sanitize(img.defect_type)}_{_sanitize(stem)}"


@dataclass
class DatasetImage:
    path: str
    class_name: str
    defect_type: str
    mask_path: str | None     # None for good images
    label: int


def scan_test_split(root, category, split="test"):
    """Sorted test images of one category with their mask paths and labels."""
    split_dir = os.path.join(root, category, split)
    if not os.path.isdir(split_dir):
        raise FileNotFoundError(f"no {split!r} split under {os.path.join(root, category)}")
    out = []
    for defect in sorted(os.listdir(split_dir)):
        ddir = os.path.join(split_dir, defect)
        if not os.path.isdir(ddir):
            continue
        for fname in sorted(os.listdir(ddir)):
            if os.path.splitext(fname)[1].lower() not in IMAGE_EXTS:
                continue
            stem = os.path.splitext(fname)[0]
            mask_path = None
            if defect != "good":
                gt_dir = os.path.join(root, category, "ground_truth", defect)
                for cand in (stem + "_mask.png", stem + ".png", fname):
                    p = os.path.join(gt_dir, cand)
                    if os.path.isfile(p):
                        mask_path = p
                        break
            out.append(DatasetImage(
                path=os.path.join(ddir, fname), class_name=category,
                defect_type=defect, mask_path=mask_path,
                label=0 if defect == "good" else 1))
    if not out:
        raise FileNotFoundError(f"no images under {split_dir}")
    return out
