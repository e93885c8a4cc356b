"""Feature-bundle container: a directory of raw tensors plus a JSON manifest.

The bundle decouples the scoring engine from whatever runtime produced the
features. Layout: one headerless little-endian file per tensor (row-major
IEEE-754 f32 or raw u8) and a `manifest.json` with stable key ordering, so
identical bundles serialize to identical bytes.
"""

import json

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ManifestError, MissingTensorError, TensorDataError

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}

SHARED_TENSORS = {
    "shared/attn_out_proj_w": "attn_out_proj_w",
    "shared/attn_out_proj_b": "attn_out_proj_b",
    "shared/ln_post_scale": "ln_post_scale",
    "shared/ln_post_bias": "ln_post_bias",
    "shared/visual_proj": "visual_proj",
    "shared/text_feats": "text_feats",
}


@dataclass
class TensorRecord:
    name: str
    dtype: str
    shape: tuple
    file: str
    byte_length: int

    def expected_bytes(self):
        return int(np.prod(self.shape, dtype=np.int64)) * _DTYPES[self.dtype].itemsize


@dataclass
class ImageEntry:
    id: str
    class_name: str
    tokens: dict          # stage layer -> tensor name
    cls_global: str
    attn_inter: str
    v_last: str
    gt_mask: str | None = None
    gt_label: str | None = None
    q_last: str | None = None
    k_last: str | None = None

    def referenced_tensors(self):
        names = list(self.tokens.values()) + [self.cls_global, self.attn_inter, self.v_last]
        for opt in (self.gt_mask, self.gt_label, self.q_last, self.k_last):
            if opt is not None:
                names.append(opt)
        return names


@dataclass
class Manifest:
    format_version: int
    model_id: str
    image_size: int
    patch_size: int
    grid: int
    feature_dim: int
    embed_dim: int
    num_heads: int
    stage_layers: list
    inter_attn_layer: int
    images: list = field(default_factory=list)
    tensors: list = field(default_factory=list)

    @property
    def num_patches(self):
        return self.grid * self.grid

    @property
    def head_dim(self):
        return self.feature_dim // self.num_heads

    def tensor_map(self):
        return {t.name: t for t in self.tensors}


@dataclass
class SharedWeights:
    attn_out_proj_w: np.ndarray
    attn_out_proj_b: np.ndarray
    ln_post_scale: np.ndarray
    ln_post_bias: np.ndarray
    visual_proj: np.ndarray
    text_feats: np.ndarray


def _expected_image_shapes(m: Manifest, entry: ImageEntry):
    n, d, c = m.num_patches, m.feature_dim, m.embed_dim
    h, dh = m.num_heads, m.head_dim
    shapes = {entry.cls_global: ("f32", (c,)),
              entry.attn_inter: ("f32", (h, n + 1, n + 1)),
              entry.v_last: ("f32", (h, n + 1, dh))}
    for layer, tname in entry.tokens.items():
        shapes[tname] = ("f32", (n, d))
    for opt in (entry.q_last, entry.k_last):
        if opt is not None:
            shapes[opt] = ("f32", (h, n + 1, dh))
    if entry.gt_label is not None:
        shapes[entry.gt_label] = ("u8", ())
    # gt_mask shape is free (original image resolution), only dtype/ndim checked
    return shapes


def validate_manifest(m: Manifest):
    """Check every manifest invariant; raise ManifestError on the first violation."""
    if m.format_version != FORMAT_VERSION:
        raise ManifestError(f"unsupported format_version {m.format_version}")
    for name, value in (("image_size", m.image_size), ("patch_size", m.patch_size),
                        ("grid", m.grid), ("feature_dim", m.feature_dim),
                        ("embed_dim", m.embed_dim), ("num_heads", m.num_heads)):
        if not isinstance(value, int) or value <= 0:
            raise ManifestError(f"{name} must be a positive integer, got {value!r}")
    if m.image_size % m.patch_size != 0:
        raise ManifestError(
            f"image_size {m.image_size} not divisible by patch_size {m.patch_size}")
    if m.grid != m.image_size // m.patch_size:
        raise ManifestError(
            f"grid {m.grid} inconsistent with image_size/patch_size "
            f"{m.image_size}/{m.patch_size}")
    if any(b <= a for a, b in zip(m.stage_layers, m.stage_layers[1:])) or not m.stage_layers:
        raise ManifestError(f"stage_layers must be strictly increasing, got {m.stage_layers}")
    if m.inter_attn_layer > max(m.stage_layers):
        raise ManifestError(
            f"inter_attn_layer {m.inter_attn_layer} exceeds max stage layer "
            f"{max(m.stage_layers)}")
    if m.feature_dim % m.num_heads != 0:
        raise ManifestError(
            f"feature_dim {m.feature_dim} not divisible by num_heads {m.num_heads}")

    tmap = m.tensor_map()
    if len(tmap) != len(m.tensors):
        raise ManifestError("duplicate tensor names in manifest")
    for rec in m.tensors:
        if rec.dtype not in _DTYPES:
            raise TensorDataError(rec.name, f"unknown dtype {rec.dtype!r}")
        if any((not isinstance(e, int)) or e < 0 for e in rec.shape):
            raise TensorDataError(rec.name, f"invalid shape {rec.shape}")
        if rec.byte_length != rec.expected_bytes():
            raise TensorDataError(
                rec.name,
                f"byte_length {rec.byte_length} does not match shape {rec.shape} "
                f"({rec.expected_bytes()} expected)")

    seen_ids = set()
    for entry in m.images:
        if entry.id in seen_ids:
            raise ManifestError(f"duplicate image id {entry.id!r}")
        seen_ids.add(entry.id)
        if sorted(entry.tokens) != sorted(m.stage_layers):
            raise ManifestError(
                f"image {entry.id!r} must provide tokens for stage layers "
                f"{m.stage_layers}, got {sorted(entry.tokens)}")
        expected = _expected_image_shapes(m, entry)
        for tname, (dtype, shape) in expected.items():
            rec = tmap.get(tname)
            if rec is None:
                raise MissingTensorError(tname, f"referenced by image {entry.id!r} but absent")
            if rec.dtype != dtype:
                raise TensorDataError(tname, f"dtype {rec.dtype} where {dtype} expected")
            if rec.shape != shape:
                raise TensorDataError(tname, f"shape {rec.shape} where {shape} expected")
        if entry.gt_mask is not None:
            rec = tmap.get(entry.gt_mask)
            if rec is None:
                raise MissingTensorError(entry.gt_mask, f"referenced by image {entry.id!r} but absent")
            if rec.dtype != "u8" or len(rec.shape) != 2:
                raise TensorDataError(entry.gt_mask, "gt_mask must be a 2-D u8 tensor")

    d, c = m.feature_dim, m.embed_dim
    shared_shapes = {
        "shared/attn_out_proj_w": (d, d),
        "shared/attn_out_proj_b": (d,),
        "shared/ln_post_scale": (d,),
        "shared/ln_post_bias": (d,),
        "shared/visual_proj": (d, c),
        "shared/text_feats": (2, c),
    }
    for tname, shape in shared_shapes.items():
        rec = tmap.get(tname)
        if rec is None:
            raise MissingTensorError(tname, "shared weight tensor absent")
        if rec.dtype != "f32":
            raise TensorDataError(tname, f"dtype {rec.dtype} where f32 expected")
        if rec.shape != shape:
            raise TensorDataError(tname, f"shape {rec.shape} where {shape} expected")


def _validate_loaded(name, rec, arr):
    """Content checks that only make sense once bytes are in memory."""
    base = name.split("/", 1)[-1]
    if base == "attn_inter":
        sums = arr.astype(np.float64).sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-3):
            worst = float(np.abs(sums - 1.0).max())
            raise TensorDataError(
                name, f"attention rows must sum to 1 within 1e-3 (worst error {worst:.2e})")
    elif name == "shared/text_feats":
        norms = np.sqrt((arr.astype(np.float64) ** 2).sum(axis=-1))
        if not np.allclose(norms, 1.0, atol=1e-4):
            raise TensorDataError(name, f"text feature rows must be unit-norm, got {norms}")
    elif base == "gt_mask":
        if not np.isin(arr, (0, 1)).all():
            raise TensorDataError(name, "gt_mask values must be in {0, 1}")
    if rec.dtype == "f32" and not np.all(np.isfinite(arr)):
        raise TensorDataError(name, "non-finite values")


class Bundle:
    """A validated manifest plus lazily loadable, cached tensors."""

    def __init__(self, path, manifest):
        self.path = path
        self.manifest = manifest
        self._records = manifest.tensor_map()
        self._cache = {}

    def load(self, name):
        if name in self._cache:
            return self._cache[name]
        rec = self._records.get(name)
        if rec is None:
            raise MissingTensorError(name, "not listed in manifest")
        fpath = os.path.join(self.path, rec.file)
        if not os.path.exists(fpath):
            raise MissingTensorError(name, f"file {rec.file} missing")
        size = os.path.getsize(fpath)
        if size != rec.byte_length:
            raise TensorDataError(
                name, f"file {rec.file} holds {size} bytes, {rec.byte_length} declared")
        with open(fpath, "rb") as fh:
            raw = fh.read()
        arr = np.frombuffer(raw, dtype=_DTYPES[rec.dtype]).reshape(rec.shape)
        _validate_loaded(name, rec, arr)
        arr = arr.copy()
        arr.flags.writeable = False
        self._cache[name] = arr
        return arr

    def image(self, image_id):
        for entry in self.manifest.images:
            if entry.id == image_id:
                return entry
        raise ManifestError(f"no image {image_id!r} in bundle")

    def shared_weights(self):
        return SharedWeights(**{attr: self.load(name) for name, attr in SHARED_TENSORS.items()})


def _manifest_to_json(m: Manifest):
    return {
        "format_version": m.format_version,
        "model_id": m.model_id,
        "image_size": m.image_size,
        "patch_size": m.patch_size,
        "grid": m.grid,
        "feature_dim": m.feature_dim,
        "embed_dim": m.embed_dim,
        "num_heads": m.num_heads,
        "stage_layers": list(m.stage_layers),
        "inter_attn_layer": m.inter_attn_layer,
        "images": [
            {
                "id": e.id,
                "class_name": e.class_name,
                **{f"tokens_L{layer}": e.tokens[layer] for layer in sorted(e.tokens)},
                "cls_global": e.cls_global,
                "attn_inter": e.attn_inter,
                "v_last": e.v_last,
                **({"gt_mask": e.gt_mask} if e.gt_mask else {}),
                **({"gt_label": e.gt_label} if e.gt_label else {}),
                **({"q_last": e.q_last} if e.q_last else {}),
                **({"k_last": e.k_last} if e.k_last else {}),
            }
            for e in m.images
        ],
        "tensors": [
            {"name": t.name, "dtype": t.dtype, "shape": list(t.shape),
             "file": t.file, "byte_length": t.byte_length}
            for t in m.tensors
        ],
    }


def _manifest_from_json(doc):
    try:
        images = []
        for e in doc["images"]:
            tokens = {int(k[len("tokens_L"):]): v for k, v in e.items()
                      if k.startswith("tokens_L")}
            images.append(ImageEntry(
                id=e["id"], class_name=e["class_name"], tokens=tokens,
                cls_global=e["cls_global"], attn_inter=e["attn_inter"],
                v_last=e["v_last"], gt_mask=e.get("gt_mask"),
                gt_label=e.get("gt_label"), q_last=e.get("q_last"),
                k_last=e.get("k_last")))
        tensors = [TensorRecord(name=t["name"], dtype=t["dtype"], shape=tuple(t["shape"]),
                                file=t["file"], byte_length=t["byte_length"])
                   for t in doc["tensors"]]
        return Manifest(
            format_version=doc["format_version"], model_id=doc["model_id"],
            image_size=doc["image_size"], patch_size=doc["patch_size"],
            grid=doc["grid"], feature_dim=doc["feature_dim"],
            embed_dim=doc["embed_dim"], num_heads=doc["num_heads"],
            stage_layers=list(doc["stage_layers"]),
            inter_attn_layer=doc["inter_attn_layer"],
            images=images, tensors=tensors)
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed manifest: {exc}") from exc


def read_bundle(path):
    """Open and fully validate a bundle directory; tensor data loads lazily."""
    mpath = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(mpath):
        raise ManifestError(f"no {MANIFEST_NAME} under {path}")
    with open(mpath, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    manifest = _manifest_from_json(doc)
    validate_manifest(manifest)
    bundle = Bundle(path, manifest)
    for rec in manifest.tensors:
        fpath = os.path.join(path, rec.file)
        if not os.path.exists(fpath):
            raise MissingTensorError(rec.name, f"file {rec.file} missing")
        size = os.path.getsize(fpath)
        if size != rec.byte_length:
            raise TensorDataError(
                rec.name, f"file {rec.file} holds {size} bytes, {rec.byte_length} declared")
    return bundle


def write_bundle(manifest, tensors, path):
    """Write a bundle directory; rejects invariant violations before touching disk.

    `tensors` maps tensor name -> ndarray; arrays are converted to the
    declared dtype and must match the declared shape.
    """
    validate_manifest(manifest)
    prepared = {}
    for rec in manifest.tensors:
        if rec.name not in tensors:
            raise MissingTensorError(rec.name, "no data supplied")
        arr = np.asarray(tensors[rec.name]).astype(_DTYPES[rec.dtype], copy=False)
        if arr.shape != rec.shape:
            raise TensorDataError(
                rec.name, f"data shape {arr.shape} does not match declared {rec.shape}")
        _validate_loaded(rec.name, rec, arr)
        prepared[rec.name] = arr
    extra = set(tensors) - set(prepared)
    if extra:
        raise ManifestError(f"tensors not listed in manifest: {sorted(extra)}")

    os.makedirs(path, exist_ok=True)
    rec_by_name = manifest.tensor_map()
    for name in sorted(prepared):
        fpath = os.path.join(path, rec_by_name[name].file)
        os.makedirs(os.path.dirname(fpath), exist_ok=True)
        with open(fpath, "wb") as fh:
            fh.write(prepared[name].tobytes(order="C"))
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(_manifest_to_json(manifest), fh, indent=2)
        fh.write("\n")


def tensor_record(name, dtype, shape, file=None):
    """Convenience constructor computing byte_length and a default file path."""
    shape = tuple(int(s) for s in shape)
    rec = TensorRecord(name=name, dtype=dtype, shape=shape,
                       file=file if file is not None else name + ".bin",
                       byte_length=0)
    rec.byte_length = rec.expected_bytes()
    return rec
