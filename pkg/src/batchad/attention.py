"""Final-block surgery: intermediate attention applied to final-layer values.

The exported attention probabilities of an intermediate layer are used in
place of the final layer's own attention, the per-head results are
concatenated and sent through the block's output projection, and neither
the residual branch nor the feed-forward sublayer is applied. Patch tokens
are then layer-normalized and projected into the text-embedding space.
"""

import numpy as np

from . import tensor_ops as T
from .errors import ConfigurationError, ShapeError

ATTN_SOURCE_MODES = ("inter", "v-v", "q-q", "k-k")


def _check_pack(attn, v):
    if attn.ndim != 3 or v.ndim != 3:
        raise ShapeError(f"attention pack must be 3-D, got {attn.shape} and {v.shape}")
    heads, n1, n1b = attn.shape
    if n1 != n1b:
        raise ShapeError(f"attention maps must be square, got {attn.shape}")
    if v.shape[0] != heads or v.shape[1] != n1:
        raise ShapeError(f"value tensor {v.shape} does not match attention {attn.shape}")
    return heads, n1, v.shape[2]


def attend_values(attn, v):
    """Per-head attn x values, heads concatenated along the feature axis.

    attn: (heads, N+1, N+1) row-stochastic; v: (heads, N+1, d_head).
    Returns (N+1, heads*d_head) float32.
    """
    heads, n1, _ = _check_pack(attn, v)
    parts = [T.matmul(attn[h], v[h]) for h in range(heads)]
    return np.concatenate(parts, axis=1)


def recombine(attn, v, proj_w, proj_b):
    """Rebuilt final-block output: concat-head attention result through the
    output projection, with no residual and no feed-forward."""
    heads, n1, d_head = _check_pack(attn, v)
    d = heads * d_head
    proj_w = np.asarray(proj_w)
    proj_b = np.asarray(proj_b)
    if proj_w.shape != (d, d) or proj_b.shape != (d,):
        raise ShapeError(
            f"projection shapes {proj_w.shape}/{proj_b.shape} do not match "
            f"feature dim {d}")
    mixed = attend_values(attn, v)
    out = mixed.astype(np.float64) @ proj_w.astype(np.float64) + proj_b.astype(np.float64)
    return out.astype(np.float32)


def project_patches(x_attn, ln_scale, ln_bias, visual_proj):
    """Drop the global token, layer-normalize, and project to embedding space."""
    x_attn = np.asarray(x_attn)
    if x_attn.ndim != 2 or x_attn.shape[0] < 2:
        raise ShapeError(f"token matrix must be ((N+1),D) with N>=1, got {x_attn.shape}")
    patches = x_attn[1:]
    normed = T.layernorm(patches, ln_scale, ln_bias)
    return T.matmul(normed, visual_proj)


def self_attention(z):
    """Row-stochastic self-similarity attention Softmax(z z^T / sqrt(d_head))."""
    z = np.asarray(z)
    if z.ndim != 3:
        raise ShapeError(f"per-head embeddings must be (heads,N+1,d_head), got {z.shape}")
    heads, _, d_head = z.shape
    scale = 1.0 / np.sqrt(float(d_head))
    out = []
    for h in range(heads):
        logits = (z[h].astype(np.float64) @ z[h].astype(np.float64).T * scale).astype(np.float32)
        out.append(T.softmax_lastdim(logits))
    return np.stack(out)


def select_attention_source(bundle, entry, mode):
    """Resolve the configured attention source for one image.

    mode "inter" uses the exported intermediate-layer attention;
    "inter:<layer>" additionally pins the expected layer id. Modes "v-v",
    "q-q" and "k-k" rebuild attention from the exported final-layer
    embeddings when present.
    """
    if mode == "inter":
        return bundle.load(entry.attn_inter)
    if mode.startswith("inter:"):
        try:
            layer = int(mode.split(":", 1)[1])
        except ValueError:
            raise ConfigurationError(f"malformed attention source {mode!r}") from None
        if layer != bundle.manifest.inter_attn_layer:
            raise ConfigurationError(
                f"attention source layer {layer} not exported "
                f"(bundle has layer {bundle.manifest.inter_attn_layer})")
        return bundle.load(entry.attn_inter)
    if mode == "v-v":
        return self_attention(bundle.load(entry.v_last))
    if mode == "q-q":
        if entry.q_last is None:
            raise ConfigurationError(
                f"attention source q-q needs final-layer query embeddings, "
                f"absent for image {entry.id!r}")
        return self_attention(bundle.load(entry.q_last))
    if mode == "k-k":
        if entry.k_last is None:
            raise ConfigurationError(
                f"attention source k-k needs final-layer key embeddings, "
                f"absent for image {entry.id!r}")
        return self_attention(bundle.load(entry.k_last))
    raise ConfigurationError(f"unknown attention source {mode!r}")
