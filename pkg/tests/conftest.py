"""Shared helpers: tiny hand-built bundles for exercising the engine."""

import numpy as np

from batchad import bundle as B


def softmax_rows(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def make_toy_bundle(rng, n_images=2, grid=3, feature_dim=8, embed_dim=6,
                    num_heads=2, stage_layers=(1, 2), inter_layer=1,
                    patch_size=14, with_gt=True, anomalous=()):
    """Build a random but internally consistent in-memory bundle.

    Returns (manifest, tensors dict). Images listed in `anomalous` get a
    one-patch ground-truth blob and label 1.
    """
    n = grid * grid
    d, c, h = feature_dim, embed_dim, num_heads
    dh = d // h
    image_size = grid * patch_size

    tensors = {}
    records = []

    def add(name, dtype, arr):
        arr = np.asarray(arr)
        records.append(B.tensor_record(name, dtype, arr.shape))
        tensors[name] = arr

    add("shared/attn_out_proj_w", "f32", rng.normal(size=(d, d)).astype(np.float32))
    add("shared/attn_out_proj_b", "f32", rng.normal(size=d).astype(np.float32))
    add("shared/ln_post_scale", "f32",
        (1.0 + 0.1 * rng.normal(size=d)).astype(np.float32))
    add("shared/ln_post_bias", "f32", (0.1 * rng.normal(size=d)).astype(np.float32))
    add("shared/visual_proj", "f32", rng.normal(size=(d, c)).astype(np.float32))
    text = rng.normal(size=(2, c))
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    add("shared/text_feats", "f32", text.astype(np.float32))

    entries = []
    for u in range(n_images):
        iid = f"img_{u:03d}"
        tokens = {}
        for layer in stage_layers:
            tname = f"{iid}/tokens_L{layer}"
            add(tname, "f32", rng.normal(size=(n, d)).astype(np.float32))
            tokens[layer] = tname
        v_full = rng.normal(size=(n + 1, d)).astype(np.float32)
        v_last = np.stack([v_full[:, i * dh:(i + 1) * dh] for i in range(h)])
        add(f"{iid}/v_last", "f32", v_last)
        attn = np.stack([
            softmax_rows(v_last[i].astype(np.float64) @ v_last[i].astype(np.float64).T
                         / np.sqrt(dh))
            for i in range(h)
        ]).astype(np.float32)
        add(f"{iid}/attn_inter", "f32", attn)
        add(f"{iid}/cls_global", "f32", rng.normal(size=c).astype(np.float32))
        entry = dict(id=iid, class_name="toy", tokens=tokens,
                     cls_global=f"{iid}/cls_global",
                     attn_inter=f"{iid}/attn_inter", v_last=f"{iid}/v_last")
        if with_gt:
            mask = np.zeros((image_size, image_size), dtype=np.uint8)
            label = 0
            if u in anomalous:
                mask[:patch_size, :patch_size] = 1
                label = 1
            add(f"{iid}/gt_mask", "u8", mask)
            add(f"{iid}/gt_label", "u8", np.array(label, dtype=np.uint8))
            entry["gt_mask"] = f"{iid}/gt_mask"
            entry["gt_label"] = f"{iid}/gt_label"
        entries.append(B.ImageEntry(**entry))

    manifest = B.Manifest(
        format_version=B.FORMAT_VERSION, model_id="toy", image_size=image_size,
        patch_size=patch_size, grid=grid, feature_dim=d, embed_dim=c,
        num_heads=h, stage_layers=list(stage_layers), inter_attn_layer=inter_layer,
        images=entries, tensors=records)
    return manifest, tensors
