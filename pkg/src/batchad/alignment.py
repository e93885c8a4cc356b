"""Text-alignment scoring: normal/abnormal probabilities for the whole image
and per patch, plus the odds-thresholded initial anomaly mask.

Probabilities are computed in double precision end to end (normalize, scaled
cosine logits, softmax) and rounded to float32 once at the end.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass
class ClsResult:
    probs: np.ndarray   # (2,) normal/abnormal
    score: float        # abnormal probability


@dataclass
class SegResult:
    probs: np.ndarray   # (N, 2)
    score: np.ndarray   # (N,) abnormal probabilities


def _check_text(text_feats):
    text_feats = np.asarray(text_feats)
    if text_feats.ndim != 2 or text_feats.shape[0] != 2:
        raise ShapeError(f"text features must be (2,C), got {text_feats.shape}")
    return text_feats


def _alignment_probs(rows, text_feats, tau):
    v = rows.astype(np.float64)
    norm = np.sqrt((v * v).sum(axis=1, keepdims=True))
    norm = np.where(norm == 0.0, 1.0, norm)
    logits = float(tau) * ((v / norm) @ text_feats.astype(np.float64).T)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def classify(f_c, text_feats, tau=100.0):
    """Image-level normal/abnormal probabilities from the global feature."""
    text_feats = _check_text(text_feats)
    f_c = np.asarray(f_c)
    if f_c.shape != (text_feats.shape[1],):
        raise ShapeError(f"global feature {f_c.shape} does not match text {text_feats.shape}")
    probs = _alignment_probs(f_c[None, :], text_feats, tau)[0]
    return ClsResult(probs=probs, score=float(probs[1]))


def segment(f_s, text_feats, tau=100.0):
    """Per-patch normal/abnormal probabilities from projected patch features."""
    text_feats = _check_text(text_feats)
    f_s = np.asarray(f_s)
    if f_s.ndim != 2 or f_s.shape[1] != text_feats.shape[1]:
        raise ShapeError(f"patch features {f_s.shape} do not match text {text_feats.shape}")
    probs = _alignment_probs(f_s, text_feats, tau)
    return SegResult(probs=probs, score=probs[:, 1].copy())


def initial_mask(seg, odds_ratio):
    """Flag patches whose abnormal probability exceeds odds_ratio times the
    normal probability (equivalently P_a > odds_ratio/(1+odds_ratio))."""
    if odds_ratio <= 0:
        raise ParameterError(f"odds ratio must be positive, got {odds_ratio}")
    p_n = seg.probs[:, 0].astype(np.float64)
    p_a = seg.probs[:, 1].astype(np.float64)
    return p_a > odds_ratio * p_n
