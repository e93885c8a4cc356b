"""Evaluation metrics computed from scratch: AU-ROC, F1-max, AP, and the
area under the per-region-overlap curve for segmentation.

All four are rank statistics: thresholds are the distinct observed scores,
never a fixed grid, so the values are invariant under strictly increasing
score transforms and match exhaustive oracles exactly up to floating-point
integration.
"""

import numpy as np

from .errors import ParameterError, ShapeError, UndefinedMetricError


def _check_samples(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.shape[0]} scores vs {labels.shape[0]} labels")
    if scores.size == 0:
        raise UndefinedMetricError("no samples")
    if not np.isfinite(scores).all():
        raise ParameterError("scores must be finite")
    labels = labels.astype(np.int64)
    if not np.isin(labels, (0, 1)).all():
        raise ParameterError("labels must be 0 or 1")
    return scores, labels


def _average_ranks(scores):
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    start = 0
    while start < scores.size:
        end = start
        while end + 1 < scores.size and sorted_scores[end + 1] == sorted_scores[start]:
            end += 1
        ranks[order[start:end + 1]] = 0.5 * (start + end) + 1.0
        start = end + 1
    return ranks


def auroc(scores, labels):
    """P(score+ > score-) + 0.5 P(score+ = score-) via tie-averaged ranks."""
    scores, labels = _check_samples(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AU-ROC needs both classes present")
    rank_sum = _average_ranks(scores)[labels == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _descending_groups(scores, labels):
    """Cumulative tp/fp after each distinct score, descending."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    boundary = np.flatnonzero(np.diff(s) != 0)
    ends = np.concatenate([boundary, [s.size - 1]])
    tp = np.cumsum(y)[ends].astype(np.float64)
    fp = (ends + 1) - tp
    return tp, fp


def ap(scores, labels):
    """Average precision over descending distinct-score thresholds, ties grouped."""
    scores, labels = _check_samples(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive sample")
    tp, fp = _descending_groups(scores, labels)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def f1max(scores, labels):
    """Maximum F1 over thresholds at every distinct score (pred = score >= t)."""
    scores, labels = _check_samples(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("F1-max needs at least one positive sample")
    tp, fp = _descending_groups(scores, labels)
    f1 = 2.0 * tp / (tp + fp + n_pos)
    return float(f1.max())


def label_regions(mask):
    """Connected components (8-connectivity) of a binary mask.

    Returns a list of (rows, cols) index-array pairs, one per region.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got {mask.shape}")
    fg = mask != 0
    h, w = fg.shape
    seen = np.zeros_like(fg)
    regions = []
    for sy, sx in zip(*np.nonzero(fg)):
        if seen[sy, sx]:
            continue
        stack = [(sy, sx)]
        seen[sy, sx] = True
        coords = []
        while stack:
            y, x = stack.pop()
            coords.append((y, x))
            for dy in (-1, 0, 1):
                yy = y + dy
                if yy < 0 or yy >= h:
                    continue
                for dx in (-1, 0, 1):
                    xx = x + dx
                    if 0 <= xx < w and fg[yy, xx] and not seen[yy, xx]:
                        seen[yy, xx] = True
                        stack.append((yy, xx))
        ys, xs = zip(*coords)
        regions.append((np.array(ys), np.array(xs)))
    return regions


def aupro(score_maps, gt_masks, fpr_cap=0.3):
    """Area under the mean per-region-overlap vs FPR curve, integrated by
    trapezoid over FPR in [0, fpr_cap] and normalized by the cap.

    Thresholds sweep the distinct pooled score values; at each threshold the
    prediction is score >= t, PRO is |pred & region| / |region| averaged over
    all ground-truth regions, and FPR is measured on anomaly-free pixels.
    """
    if not 0.0 < fpr_cap <= 1.0:
        raise ParameterError(f"fpr_cap must lie in (0,1], got {fpr_cap}")
    if len(score_maps) != len(gt_masks) or len(score_maps) == 0:
        raise ShapeError("need equally many score maps and ground-truth masks")

    region_sizes = []
    flat_scores = []
    flat_region = []   # global region id per pixel, -1 for background
    flat_neg = []
    for m, g in zip(score_maps, gt_masks):
        m = np.asarray(m, dtype=np.float64)
        g = np.asarray(g)
        if m.shape != g.shape:
            raise ShapeError(f"map {m.shape} vs mask {g.shape}")
        if not np.isfinite(m).all():
            raise ParameterError("score maps must be finite")
        rid = np.full(g.shape, -1, dtype=np.int64)
        for ys, xs in label_regions(g):
            rid[ys, xs] = len(region_sizes)
            region_sizes.append(ys.size)
        flat_scores.append(m.ravel())
        flat_region.append(rid.ravel())
        flat_neg.append((g == 0).ravel())
    if not region_sizes:
        raise UndefinedMetricError("AU-PRO needs at least one ground-truth region")
    scores = np.concatenate(flat_scores)
    region = np.concatenate(flat_region)
    neg = np.concatenate(flat_neg)
    n_neg = int(neg.sum())
    if n_neg == 0:
        raise UndefinedMetricError("AU-PRO needs anomaly-free pixels for the FPR axis")
    region_sizes = np.asarray(region_sizes, dtype=np.float64)

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    reg = region[order]
    neg_sorted = neg[order]

    tp_per_region = np.zeros(region_sizes.size, dtype=np.int64)
    fp = 0
    xs = [0.0]
    ys = [0.0]
    start = 0
    n = s.size
    while start < n:
        end = start
        while end + 1 < n and s[end + 1] == s[start]:
            end += 1
        chunk_reg = reg[start:end + 1]
        hits = chunk_reg[chunk_reg >= 0]
        if hits.size:
            np.add.at(tp_per_region, hits, 1)
        fp += int(neg_sorted[start:end + 1].sum())
        xs.append(fp / n_neg)
        ys.append(float((tp_per_region / region_sizes).mean()))
        start = end + 1

    xs = np.asarray(xs)
    ys = np.asarray(ys)
    area = 0.0
    for k in range(1, xs.size):
        x0, x1 = xs[k - 1], xs[k]
        y0, y1 = ys[k - 1], ys[k]
        if x1 <= fpr_cap:
            area += 0.5 * (y0 + y1) * (x1 - x0)
            if x1 == fpr_cap:
                break
        else:
            if x1 > x0:
                y_cap = y0 + (y1 - y0) * (fpr_cap - x0) / (x1 - x0)
                area += 0.5 * (y0 + y_cap) * (fpr_cap - x0)
            break
    return float(area / fpr_cap)


REPORT_KEYS = (
    "image_auroc", "image_f1max", "image_ap",
    "pixel_auroc", "pixel_f1max", "pixel_ap", "pixel_aupro",
)


def report_text(values):
    """Serialize a metric mapping as stable `key = value` lines, 4 decimals."""
    lines = []
    for key in REPORT_KEYS:
        if key in values:
            lines.append(f"{key} = {values[key]:.4f}")
    for key in sorted(values):
        if key not in REPORT_KEYS:
            lines.append(f"{key} = {values[key]:.4f}")
    return "\n".join(lines) + "\n"
