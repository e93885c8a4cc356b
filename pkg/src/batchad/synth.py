"""Synthetic feature-bundle generator for desk-scale end-to-end runs.

Uses a counter-based PRNG (Philox) keyed by the seed, so the same
parameters always produce byte-identical bundles. Normal patch tokens are
drawn from one shared Gaussian per stage; each anomalous image receives a
contiguous square blob of patches displaced by a fixed random direction of
norm offset*sigma*sqrt(D), identical across stages, so anomalous images
cross-reference each other during matching. Attention packs are the
row-normalized self-similarity of the final-stage tokens.

Text features are the normalized means of the projected normal vs displaced
populations, measured on a held-out calibration set drawn after the bundle
images: reusing the bundle's own rows would correlate the text rows with
the specific sampling noise of the anomalous images and leak labels even
at offset 0.
"""

import numpy as np

from . import attention, bundle as B, tensor_ops as T
from .errors import ParameterError

STAGE_LAYERS = (6, 12, 18, 24)
INTER_LAYER = 12
PATCH_SIZE = 14
NOISE_SIGMA = 1.0
CALIBRATION_IMAGES = 8


def _heads_for(dim):
    for h in (4, 2, 1):
        if dim % h == 0:
            return h
    return 1


def build(seed, n_images, grid, dim, anomaly_frac, offset):
    """Create an in-memory synthetic bundle: (manifest, tensors dict)."""
    if n_images < 1:
        raise ParameterError(f"need at least one image, got {n_images}")
    if grid < 2:
        raise ParameterError(f"grid must be at least 2, got {grid}")
    if dim < 4:
        raise ParameterError(f"feature dim must be at least 4, got {dim}")
    if not 0.0 <= anomaly_frac <= 1.0:
        raise ParameterError(f"anomaly fraction must lie in [0,1], got {anomaly_frac}")
    if offset < 0:
        raise ParameterError(f"offset must be non-negative, got {offset}")

    rng = np.random.Generator(np.random.Philox(key=seed))
    n = grid * grid
    heads = _heads_for(dim)
    d_head = dim // heads
    embed_dim = max(4, dim // 2)
    image_size = grid * PATCH_SIZE

    stage_means = {layer: rng.normal(size=dim) for layer in STAGE_LAYERS}
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    displacement = offset * NOISE_SIGMA * np.sqrt(dim) * direction

    n_anom = int(round(anomaly_frac * n_images))
    anom_ids = set(rng.permutation(n_images)[:n_anom].tolist())

    proj_w = np.linalg.qr(rng.normal(size=(dim, dim)))[0].astype(np.float32)
    proj_b = (0.01 * rng.normal(size=dim)).astype(np.float32)
    ln_scale = (1.0 + 0.05 * rng.normal(size=dim)).astype(np.float32)
    ln_bias = (0.02 * rng.normal(size=dim)).astype(np.float32)
    visual_proj = np.linalg.qr(rng.normal(size=(dim, embed_dim)))[0].astype(np.float32)

    blob_side = min(grid, max(2, int(round(0.35 * grid))))

    tensors = {}
    records = []

    def add(name, dtype, arr):
        records.append(B.tensor_record(name, dtype, np.asarray(arr).shape))
        tensors[name] = arr

    def draw_blob():
        y0, x0 = (int(v) for v in rng.integers(0, grid - blob_side + 1, size=2))
        blob2d = np.zeros((grid, grid), dtype=bool)
        blob2d[y0:y0 + blob_side, x0:x0 + blob_side] = True
        return blob2d, (y0, x0)

    def draw_tokens(blob_flat):
        stage_arrays = {}
        for layer in STAGE_LAYERS:
            arr = stage_means[layer] + NOISE_SIGMA * rng.normal(size=(n, dim))
            arr[blob_flat] += displacement
            stage_arrays[layer] = arr.astype(np.float32)
        return stage_arrays

    def attention_pack(final_tokens):
        v_full = np.vstack([final_tokens.astype(np.float64).mean(axis=0, keepdims=True),
                            final_tokens.astype(np.float64)]).astype(np.float32)
        v_last = np.stack([v_full[:, h * d_head:(h + 1) * d_head] for h in range(heads)])
        attn = np.stack([
            T.softmax_lastdim(
                (v_last[h].astype(np.float64) @ v_last[h].astype(np.float64).T
                 / np.sqrt(d_head)).astype(np.float32))
            for h in range(heads)
        ])
        return v_last, attn

    def patch_features(v_last, attn):
        x_attn = attention.recombine(attn, v_last, proj_w, proj_b)
        return attention.project_patches(x_attn, ln_scale, ln_bias, visual_proj)

    entries = []
    for u in range(n_images):
        iid = f"img_{u:03d}"
        anomalous = u in anom_ids
        blob = np.zeros(n, dtype=bool)
        mask = np.zeros((image_size, image_size), dtype=np.uint8)
        if anomalous:
            blob2d, (y0, x0) = draw_blob()
            blob = blob2d.reshape(n)
            mask[y0 * PATCH_SIZE:(y0 + blob_side) * PATCH_SIZE,
                 x0 * PATCH_SIZE:(x0 + blob_side) * PATCH_SIZE] = 1

        stage_arrays = draw_tokens(blob)
        tokens = {}
        for layer in STAGE_LAYERS:
            tname = f"{iid}/tokens_L{layer}"
            add(tname, "f32", stage_arrays[layer])
            tokens[layer] = tname

        v_last, attn = attention_pack(stage_arrays[STAGE_LAYERS[-1]])
        add(f"{iid}/v_last", "f32", v_last)
        add(f"{iid}/attn_inter", "f32", attn)

        f_s = patch_features(v_last, attn)
        cls_global = f_s.astype(np.float64).mean(axis=0).astype(np.float32)
        add(f"{iid}/cls_global", "f32", cls_global)
        add(f"{iid}/gt_mask", "u8", mask)
        add(f"{iid}/gt_label", "u8", np.array(1 if anomalous else 0, dtype=np.uint8))
        entries.append(B.ImageEntry(
            id=iid, class_name="synthetic", tokens=tokens,
            cls_global=f"{iid}/cls_global", attn_inter=f"{iid}/attn_inter",
            v_last=f"{iid}/v_last", gt_mask=f"{iid}/gt_mask",
            gt_label=f"{iid}/gt_label"))

    # held-out calibration population for the text rows, half with blobs
    cal_feats = []
    cal_blob = []
    for k in range(CALIBRATION_IMAGES):
        blob = np.zeros(n, dtype=bool)
        if k % 2 == 0:
            blob = draw_blob()[0].reshape(n)
        stage_arrays = draw_tokens(blob)
        v_last, attn = attention_pack(stage_arrays[STAGE_LAYERS[-1]])
        cal_feats.append(patch_features(v_last, attn).astype(np.float64))
        cal_blob.append(blob)
    cal_feats = np.concatenate(cal_feats)
    cal_blob = np.concatenate(cal_blob)
    text = np.stack([cal_feats[~cal_blob].mean(axis=0),
                     cal_feats[cal_blob].mean(axis=0)])
    text /= np.linalg.norm(text, axis=1, keepdims=True)

    add("shared/attn_out_proj_w", "f32", proj_w)
    add("shared/attn_out_proj_b", "f32", proj_b)
    add("shared/ln_post_scale", "f32", ln_scale)
    add("shared/ln_post_bias", "f32", ln_bias)
    add("shared/visual_proj", "f32", visual_proj)
    add("shared/text_feats", "f32", text.astype(np.float32))

    manifest = B.Manifest(
        format_version=B.FORMAT_VERSION, model_id=f"synthetic-seed{seed}",
        image_size=image_size, patch_size=PATCH_SIZE, grid=grid,
        feature_dim=dim, embed_dim=embed_dim, num_heads=heads,
        stage_layers=list(STAGE_LAYERS), inter_attn_layer=INTER_LAYER,
        images=entries, tensors=records)
    return manifest, tensors
