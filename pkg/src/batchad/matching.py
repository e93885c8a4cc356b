"""Mutual-reference feature matching with noise filtering.

Patch tokens of every image in a batch are aggregated over odd
neighborhoods, matched against the (mask-filtered) patch tokens of all
other images by exact minimum distance, and the resulting scores refine
the masks over successive rounds. Patch scores are float64 throughout;
per-pair distances are computed by a kernel whose value for a row pair is
independent of which other rows are present, so shrinking a reference pool
can never lower a score (exact monotonicity), and matching per reference
image then taking minima is bit-identical to matching one concatenated
pool.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor_ops as T
from .errors import ConfigurationError, ParameterError, ShapeError

LOOP_ORDERS = ("ri", "r-i", "ir", "flat")
DISTANCES = ("l2", "cosine")
VOTE_MODES = ("or", "and")

# cap on float64 elements materialized per pairwise block
_BLOCK_ELEMS = 1 << 24


def aggregate(tokens, r):
    """Average patch tokens over the r x r grid neighborhood of each position."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be (N,D), got {tokens.shape}")
    n, d = tokens.shape
    g = math.isqrt(n)
    if g * g != n:
        raise ShapeError(f"token count {n} is not a perfect square grid")
    if r == 1:
        return tokens.copy()
    pooled = T.avgpool_neighborhood(tokens.reshape(g, g, d), r)
    return pooled.reshape(n, d)


def pairwise_distances(a, b, metric="l2"):
    """All-pairs distances (len(a), len(b)) in float64.

    Every entry is a function of its two rows only (blocked differences with
    a per-row einsum reduction), never of the surrounding matrix.
    """
    if metric not in DISTANCES:
        raise ConfigurationError(f"unknown distance {metric!r}")
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    if a64.ndim != 2 or b64.ndim != 2 or a64.shape[1] != b64.shape[1]:
        raise ShapeError(f"incompatible row matrices {a64.shape} and {b64.shape}")
    na, d = a64.shape
    nb = b64.shape[0]
    if metric == "cosine":
        def _unit(m):
            norm = np.sqrt(np.einsum("ad,ad->a", m, m))[:, None]
            return m / np.where(norm == 0.0, 1.0, norm)
        sims = np.einsum("ad,bd->ab", _unit(a64), _unit(b64))
        return np.maximum(1.0 - sims, 0.0)
    out = np.empty((na, nb), dtype=np.float64)
    step = max(1, _BLOCK_ELEMS // max(1, nb * d))
    for s in range(0, na, step):
        e = min(na, s + step)
        diff = a64[s:e, None, :] - b64[None, :, :]
        out[s:e] = np.einsum("abd,abd->ab", diff, diff)
    return np.sqrt(out)


def match_min(target, pool, metric="l2"):
    """Per-patch minimum distance from target rows to any pool row."""
    pool = np.asarray(pool)
    if pool.ndim != 2 or pool.shape[0] < 1:
        raise ParameterError(f"reference pool must be non-empty, got shape {pool.shape}")
    return pairwise_distances(target, pool, metric).min(axis=1)


def filter_pool(features, mask, scores, floor_fraction=0.1):
    """Rows of `features` where `mask` is False, backfilled up to the pool
    floor with the lowest-scoring masked rows when too few survive.

    Returns (rows, kept row indices).
    """
    features = np.asarray(features)
    mask = np.asarray(mask, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n = features.shape[0]
    if mask.shape != (n,) or scores.shape != (n,):
        raise ShapeError(
            f"mask {mask.shape} / scores {scores.shape} do not match {n} feature rows")
    floor = max(1, math.ceil(floor_fraction * n))
    kept = np.flatnonzero(~mask)
    if kept.size < floor:
        masked = np.flatnonzero(mask)
        order = np.lexsort((masked, scores[masked]))
        backfill = masked[order[: floor - kept.size]]
        kept = np.sort(np.concatenate([kept, backfill]))
    return features[kept], kept


def stage_average(scores):
    """Arithmetic mean over a non-empty list of equal-length score vectors."""
    if len(scores) == 0:
        raise ParameterError("stage_average needs at least one score vector")
    stack = np.stack([np.asarray(s, dtype=np.float64) for s in scores])
    return stack.mean(axis=0)


def binarize(score, threshold):
    """Min-max normalize a score vector to [0,1] and flag entries above the
    threshold; a constant vector normalizes to all zeros (no flags)."""
    if not 0.0 <= threshold <= 1.0:
        raise ParameterError(f"binarize threshold must lie in [0,1], got {threshold}")
    s = np.asarray(score, dtype=np.float64)
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.zeros(s.shape, dtype=bool)
    return (s - lo) / (hi - lo) > threshold


def vote(mask_a, mask_b, mode="or"):
    """Combine two boolean masks elementwise."""
    mask_a = np.asarray(mask_a, dtype=bool)
    mask_b = np.asarray(mask_b, dtype=bool)
    if mask_a.shape != mask_b.shape:
        raise ShapeError(f"mask shapes disagree: {mask_a.shape} vs {mask_b.shape}")
    if mode == "or":
        return mask_a | mask_b
    if mode == "and":
        return mask_a & mask_b
    raise ConfigurationError(f"unknown vote mode {mode!r}")


@dataclass
class MutualResult:
    fused: list                      # per image (N,) float64 running-mean score
    masks: list                      # per image final boolean mask
    terms: list = field(default_factory=list)   # per image {label: (N,) score}


def _rounds(stage_layers, scales, loop_order):
    if loop_order == "ri":
        return [(f"r{r}", [(i, r) for i in stage_layers]) for r in scales]
    if loop_order == "r-i":
        return [(f"r{r}", [(i, r) for i in stage_layers]) for r in reversed(scales)]
    if loop_order == "ir":
        return [(f"L{i}", [(i, r) for r in scales]) for i in stage_layers]
    if loop_order == "flat":
        return [(f"r{r}_L{i}", [(i, r)]) for r in scales for i in stage_layers]
    raise ConfigurationError(f"unknown loop order {loop_order!r}")


def mutual_filter_loop(stage_tokens, init_masks, init_scores, *, scales=(1, 3, 5),
                       stage_layers=None, mu=0.57, vote_mode="or",
                       pool_floor_fraction=0.1, metric="l2", loop_order="ri"):
    """Run the mutual noise-filtering loop over one batch.

    stage_tokens: per image, dict stage layer -> (N,D) raw tokens.
    init_masks/init_scores: the text-alignment masks and per-patch abnormal
    probabilities that seed filtering and the running fused score.

    Each round matches every image against the mask-filtered tokens of all
    others at one neighborhood scale (or stage, or single combination,
    depending on loop_order), averages the per-round scores into a running
    fused mean, and refines all masks at a barrier before the next round.
    """
    batch = len(stage_tokens)
    if batch != len(init_masks) or batch != len(init_scores):
        raise ShapeError("stage_tokens, masks and scores must cover the same images")
    if vote_mode not in VOTE_MODES:
        raise ConfigurationError(f"unknown vote mode {vote_mode!r}")
    if stage_layers is None:
        stage_layers = sorted(stage_tokens[0])
    for u, tokens in enumerate(stage_tokens):
        missing = [i for i in stage_layers if i not in tokens]
        if missing:
            raise ShapeError(f"image {u} lacks stage layers {missing}")

    fused = [np.asarray(s, dtype=np.float64).copy() for s in init_scores]
    masks = [np.asarray(m, dtype=bool).copy() for m in init_masks]
    terms = [{"alignment": fused[u].copy()} for u in range(batch)]

    if batch < 2:
        warnings.warn(
            "batch holds a single image: no mutual references, falling back "
            "to text-alignment scores only")
        return MutualResult(fused=fused, masks=masks, terms=terms)

    term_stacks = [[fused[u].copy()] for u in range(batch)]
    for label, combos in _rounds(list(stage_layers), list(scales), loop_order):
        mask_snap = [m.copy() for m in masks]
        fused_snap = [f.copy() for f in fused]
        per_round = [[] for _ in range(batch)]
        for layer, r in combos:
            feats = [aggregate(stage_tokens[u][layer], r) for u in range(batch)]
            pools = [filter_pool(feats[v], mask_snap[v], fused_snap[v],
                                 pool_floor_fraction)[0] for v in range(batch)]
            for u in range(batch):
                best = None
                for v in range(batch):
                    if v == u:
                        continue
                    d = match_min(feats[u], pools[v], metric)
                    best = d if best is None else np.minimum(best, d)
                per_round[u].append(best)
        for u in range(batch):
            round_score = stage_average(per_round[u])
            terms[u][label] = round_score
            term_stacks[u].append(round_score)
            fused[u] = np.stack(term_stacks[u]).mean(axis=0)
            inter = binarize(round_score, mu)
            masks[u] = vote(masks[u], inter, vote_mode)
    return MutualResult(fused=fused, masks=masks, terms=terms)


def fuse_and_postprocess(fused_scores, cls_scores, grid, target_shapes,
                         sigma=4.0, weight=0.5):
    """Turn per-patch fused scores into pixel maps and image-level scores.

    Pixel map: bilinear upsample of the grid map to the target resolution,
    then Gaussian smoothing. Image score: weight * classification score +
    (1 - weight) * peak of the pixel map after min-max normalization over
    the whole batch.
    """
    batch = len(fused_scores)
    if batch != len(cls_scores) or batch != len(target_shapes):
        raise ShapeError("scores and target shapes must cover the same images")
    maps = []
    for u in range(batch):
        gmap = np.asarray(fused_scores[u], dtype=np.float32).reshape(grid, grid)
        h, w = target_shapes[u]
        up = T.bilinear_upsample(gmap, h, w)
        maps.append(T.gaussian_blur(up, sigma))
    lo = min(float(m.min()) for m in maps)
    hi = max(float(m.max()) for m in maps)
    span = hi - lo
    image_scores = []
    for u in range(batch):
        peak = 0.0 if span == 0.0 else (float(maps[u].max()) - lo) / span
        image_scores.append(float(weight) * float(cls_scores[u])
                            + (1.0 - float(weight)) * peak)
    return maps, image_scores
