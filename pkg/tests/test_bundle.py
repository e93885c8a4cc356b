import copy
import json
import os
import struct

import numpy as np
import pytest

from batchad import bundle as B
from batchad.errors import BundleError, ManifestError, MissingTensorError, TensorDataError
from conftest import make_toy_bundle


def _dir_bytes(path):
    out = {}
    for root, _, files in os.walk(path):
        for f in files:
            p = os.path.join(root, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, path)] = fh.read()
    return out


def test_round_trip(tmp_path):
    rng = np.random.default_rng(100)
    manifest, tensors = make_toy_bundle(rng)
    path = tmp_path / "bundle"
    B.write_bundle(manifest, tensors, path)
    loaded = B.read_bundle(path)
    assert loaded.manifest == manifest
    for name, arr in tensors.items():
        got = loaded.load(name)
        want = np.ascontiguousarray(arr, dtype=got.dtype)
        assert got.tobytes() == want.tobytes(), name


def test_ieee754_little_endian(tmp_path):
    rng = np.random.default_rng(101)
    manifest, tensors = make_toy_bundle(rng, n_images=1)
    name = "img_000/cls_global"
    tensors[name] = np.ones_like(tensors[name])
    B.write_bundle(manifest, tensors, tmp_path / "b")
    rec = manifest.tensor_map()[name]
    with open(tmp_path / "b" / rec.file, "rb") as fh:
        first4 = fh.read(4)
    assert first4 == bytes([0x00, 0x00, 0x80, 0x3F])
    assert first4 == struct.pack("<f", 1.0)


def test_truncated_tensor_named(tmp_path):
    rng = np.random.default_rng(102)
    manifest, tensors = make_toy_bundle(rng)
    path = tmp_path / "b"
    B.write_bundle(manifest, tensors, path)
    victim = manifest.tensor_map()["img_001/v_last"]
    fpath = path / victim.file
    data = fpath.read_bytes()
    fpath.write_bytes(data[:-1])
    with pytest.raises(TensorDataError) as err:
        B.read_bundle(path)
    assert "img_001/v_last" in str(err.value)


def test_missing_tensor_file_named(tmp_path):
    rng = np.random.default_rng(103)
    manifest, tensors = make_toy_bundle(rng)
    path = tmp_path / "b"
    B.write_bundle(manifest, tensors, path)
    rec = manifest.tensor_map()["img_000/attn_inter"]
    os.remove(path / rec.file)
    with pytest.raises(MissingTensorError) as err:
        B.read_bundle(path)
    assert "img_000/attn_inter" in str(err.value)


def test_invalid_write_creates_nothing(tmp_path):
    rng = np.random.default_rng(104)
    manifest, tensors = make_toy_bundle(rng)
    manifest.grid = manifest.grid + 1  # grid != image_size / patch_size
    target = tmp_path / "b"
    with pytest.raises(ManifestError):
        B.write_bundle(manifest, tensors, target)
    assert not target.exists()


def test_write_determinism(tmp_path):
    rng = np.random.default_rng(105)
    manifest, tensors = make_toy_bundle(rng)
    B.write_bundle(manifest, tensors, tmp_path / "a")
    B.write_bundle(manifest, tensors, tmp_path / "b")
    assert _dir_bytes(tmp_path / "a") == _dir_bytes(tmp_path / "b")


def test_attention_row_sum_validated(tmp_path):
    rng = np.random.default_rng(106)
    manifest, tensors = make_toy_bundle(rng)
    bad = np.array(tensors["img_000/attn_inter"], copy=True)
    bad[0, 0, :] *= 2.0
    tensors["img_000/attn_inter"] = bad
    with pytest.raises(TensorDataError) as err:
        B.write_bundle(manifest, tensors, tmp_path / "b")
    assert "attn_inter" in str(err.value)


def test_text_feats_norm_validated(tmp_path):
    rng = np.random.default_rng(107)
    manifest, tensors = make_toy_bundle(rng)
    tensors["shared/text_feats"] = tensors["shared/text_feats"] * 1.5
    with pytest.raises(TensorDataError) as err:
        B.write_bundle(manifest, tensors, tmp_path / "b")
    assert "text_feats" in str(err.value)


def test_gt_mask_binary_validated(tmp_path):
    rng = np.random.default_rng(108)
    manifest, tensors = make_toy_bundle(rng)
    bad = np.array(tensors["img_000/gt_mask"], copy=True)
    bad[0, 0] = 7
    tensors["img_000/gt_mask"] = bad
    with pytest.raises(TensorDataError):
        B.write_bundle(manifest, tensors, tmp_path / "b")


def test_corruption_fuzz_sweep(tmp_path):
    """Every single-field corruption of shape, dtype, or byte_length is rejected."""
    rng = np.random.default_rng(109)
    manifest, tensors = make_toy_bundle(rng, n_images=1)
    path = tmp_path / "b"
    B.write_bundle(manifest, tensors, path)
    with open(path / B.MANIFEST_NAME, "r", encoding="utf-8") as fh:
        doc = json.load(fh)

    corruptions = []
    for idx, rec in enumerate(doc["tensors"]):
        corruptions.append((idx, "dtype", "f64"))
        if rec["shape"]:
            bumped = list(rec["shape"])
            bumped[0] += 1
            corruptions.append((idx, "shape", bumped))
        corruptions.append((idx, "byte_length", rec["byte_length"] + 4))

    assert len(corruptions) >= 20
    for idx, field, value in corruptions:
        mutated = copy.deepcopy(doc)
        mutated["tensors"][idx][field] = value
        with open(path / B.MANIFEST_NAME, "w", encoding="utf-8") as fh:
            json.dump(mutated, fh)
        with pytest.raises(BundleError):
            bundle = B.read_bundle(path)
            for rec in bundle.manifest.tensors:
                bundle.load(rec.name)

    with open(path / B.MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    B.read_bundle(path)


def test_manifest_invariants():
    rng = np.random.default_rng(110)
    manifest, _ = make_toy_bundle(rng)

    bad = copy.deepcopy(manifest)
    bad.stage_layers = [2, 1]
    with pytest.raises(ManifestError):
        B.validate_manifest(bad)

    bad = copy.deepcopy(manifest)
    bad.inter_attn_layer = 99
    with pytest.raises(ManifestError):
        B.validate_manifest(bad)

    bad = copy.deepcopy(manifest)
    bad.num_heads = 3  # does not divide feature_dim=8
    with pytest.raises(ManifestError):
        B.validate_manifest(bad)


def test_loaded_arrays_immutable(tmp_path):
    rng = np.random.default_rng(111)
    manifest, tensors = make_toy_bundle(rng)
    B.write_bundle(manifest, tensors, tmp_path / "b")
    bundle = B.read_bundle(tmp_path / "b")
    arr = bundle.load("shared/visual_proj")
    with pytest.raises(ValueError):
        arr[0, 0] = 1.0
