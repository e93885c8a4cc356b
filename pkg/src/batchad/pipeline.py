"""End-to-end scoring: bundle -> per-image pixel maps and image scores."""

from dataclasses import dataclass

import numpy as np

from . import alignment, attention, matching
from .errors import ConfigurationError


@dataclass
class ImageResult:
    id: str
    class_name: str
    image_score: float
    cls_score: float
    pixel_map: np.ndarray          # (H', W') float32
    fused: np.ndarray              # (N,) float64 per-patch fused score
    mask: np.ndarray               # (N,) bool final filtering mask
    seg_score: np.ndarray          # (N,) float32 text-alignment score


def _batches(items, batch_size):
    if batch_size <= 0:
        return [items]
    return [items[i:i + batch_size] for i in range(0, len(items), batch_size)]


def _target_shape(bundle, entry):
    if entry.gt_mask is not None:
        rec = bundle.manifest.tensor_map()[entry.gt_mask]
        return tuple(rec.shape)
    size = bundle.manifest.image_size
    return (size, size)


def score_bundle(bundle, cfg):
    """Score every image of a bundle under a validated RunConfig."""
    manifest = bundle.manifest
    stage_layers = list(cfg.stage_layers) if cfg.stage_layers else list(manifest.stage_layers)
    missing = [i for i in stage_layers if i not in manifest.stage_layers]
    if missing:
        raise ConfigurationError(
            f"config stage_layers {missing} not exported by the bundle "
            f"(available: {manifest.stage_layers})")

    shared = bundle.shared_weights()
    results = []
    for group in _batches(list(manifest.images), cfg.batch_size):
        cls_results = []
        seg_results = []
        masks = []
        stage_tokens = []
        for entry in group:
            attn = attention.select_attention_source(bundle, entry, cfg.attn_source)
            x_attn = attention.recombine(
                attn, bundle.load(entry.v_last),
                shared.attn_out_proj_w, shared.attn_out_proj_b)
            f_s = attention.project_patches(
                x_attn, shared.ln_post_scale, shared.ln_post_bias, shared.visual_proj)
            cls_results.append(alignment.classify(
                bundle.load(entry.cls_global), shared.text_feats, cfg.tau))
            seg = alignment.segment(f_s, shared.text_feats, cfg.tau)
            seg_results.append(seg)
            masks.append(alignment.initial_mask(seg, cfg.lambda_))
            stage_tokens.append({i: bundle.load(entry.tokens[i]) for i in stage_layers})

        mutual = matching.mutual_filter_loop(
            stage_tokens, masks, [seg.score for seg in seg_results],
            scales=cfg.scales, stage_layers=stage_layers, mu=cfg.mu,
            vote_mode=cfg.vote_mode, pool_floor_fraction=cfg.pool_floor_fraction,
            metric=cfg.distance, loop_order=cfg.loop_order)

        shapes = [_target_shape(bundle, entry) for entry in group]
        maps, image_scores = matching.fuse_and_postprocess(
            mutual.fused, [c.score for c in cls_results], manifest.grid,
            shapes, sigma=cfg.sigma, weight=cfg.fusion_weight)

        for idx, entry in enumerate(group):
            results.append(ImageResult(
                id=entry.id, class_name=entry.class_name,
                image_score=image_scores[idx], cls_score=cls_results[idx].score,
                pixel_map=maps[idx], fused=mutual.fused[idx],
                mask=mutual.masks[idx], seg_score=seg_results[idx].score))
    return results
