"""Dense numeric kernels used by every other module.

All kernels take float32 arrays, accumulate in float64 with a fixed
reduction order, and round to float32 once at write-out, so results are
bit-deterministic across runs. Every public operation checks that its
output is finite (no NaN/Inf propagation).
"""

import math

import numpy as np

from .errors import NumericalError, ParameterError, ShapeError

__all__ = [
    "matmul",
    "softmax_lastdim",
    "l2_normalize",
    "avgpool_neighborhood",
    "bilinear_upsample",
    "gaussian_blur",
    "layernorm",
]


def _as_f32(x, name="input"):
    a = np.asarray(x)
    if not np.issubdtype(a.dtype, np.floating) and not np.issubdtype(a.dtype, np.integer):
        raise ShapeError(f"{name} must be numeric, got dtype {a.dtype}")
    return np.ascontiguousarray(a, dtype=np.float32)


def _finish(out64, op):
    out = out64.astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{op} produced non-finite values")
    return out


def matmul(a, b):
    """Matrix product (m,k) x (k,n) -> (m,n), float64 accumulation."""
    a = _as_f32(a, "a")
    b = _as_f32(b, "b")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.astype(np.float64) @ b.astype(np.float64)
    return _finish(out, "matmul")


def softmax_lastdim(x):
    """Softmax over the last axis with max-subtraction for stability."""
    x = _as_f32(x, "x")
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_lastdim needs a non-empty last axis, got {x.shape}")
    z = x.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return _finish(e / e.sum(axis=-1, keepdims=True), "softmax_lastdim")


def l2_normalize(x, axis=-1):
    """Scale slices along `axis` to unit Euclidean norm; zero slices pass through."""
    x = _as_f32(x, "x")
    v = x.astype(np.float64)
    norm = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    norm = np.where(norm == 0.0, 1.0, norm)
    return _finish(v / norm, "l2_normalize")


def avgpool_neighborhood(x, r):
    """Mean over the r x r window centered at each cell of an (H,W,D) grid.

    Out-of-bounds neighbors are excluded and the denominator is the count
    of in-bounds cells, so borders are not biased toward zero.
    """
    x = _as_f32(x, "x")
    if x.ndim != 3:
        raise ShapeError(f"avgpool_neighborhood expects (H,W,D), got {x.shape}")
    if not isinstance(r, (int, np.integer)) or r < 1 or r % 2 == 0:
        raise ParameterError(f"window size must be a positive odd integer, got {r!r}")
    if r == 1:
        return x.copy()
    h, w, _ = x.shape
    half = r // 2
    v = x.astype(np.float64)
    acc = np.zeros_like(v)
    cnt = np.zeros((h, w, 1), dtype=np.float64)
    for dy in range(-half, half + 1):
        ys0, ys1 = max(0, dy), min(h, h + dy)
        yd0, yd1 = max(0, -dy), min(h, h - dy)
        for dx in range(-half, half + 1):
            xs0, xs1 = max(0, dx), min(w, w + dx)
            xd0, xd1 = max(0, -dx), min(w, w - dx)
            acc[yd0:yd1, xd0:xd1] += v[ys0:ys1, xs0:xs1]
            cnt[yd0:yd1, xd0:xd1] += 1.0
    return _finish(acc / cnt, "avgpool_neighborhood")


def bilinear_upsample(m, out_h, out_w):
    """Resample an (h,w) map to (out_h,out_w) with half-pixel-center bilinear weights."""
    m = _as_f32(m, "map")
    if m.ndim != 2:
        raise ShapeError(f"bilinear_upsample expects a 2-D map, got {m.shape}")
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"target extents must be positive, got {out_h}x{out_w}")
    h, w = m.shape
    v = m.astype(np.float64)

    def _axis_coords(src_n, dst_n):
        scale = src_n / dst_n
        src = (np.arange(dst_n, dtype=np.float64) + 0.5) * scale - 0.5
        src = np.clip(src, 0.0, src_n - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, src_n - 1)
        frac = src - lo
        return lo, hi, frac

    y0, y1, fy = _axis_coords(h, out_h)
    x0, x1, fx = _axis_coords(w, out_w)
    fy = fy[:, None]
    fx = fx[None, :]
    top = v[y0][:, x0] * (1.0 - fx) + v[y0][:, x1] * fx
    bot = v[y1][:, x0] * (1.0 - fx) + v[y1][:, x1] * fx
    return _finish(top * (1.0 - fy) + bot * fy, "bilinear_upsample")


def gaussian_blur(m, sigma):
    """Separable Gaussian smoothing of an (H,W) map.

    Kernel radius = ceil(3*sigma); at borders the kernel is renormalized
    over in-bounds taps so constant fields are preserved. sigma=0 is the
    identity.
    """
    m = _as_f32(m, "map")
    if m.ndim != 2:
        raise ShapeError(f"gaussian_blur expects a 2-D map, got {m.shape}")
    if sigma < 0:
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return m.copy()
    radius = int(math.ceil(3.0 * sigma))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1, dtype=np.float64) / sigma) ** 2)
    taps /= taps.sum()

    def _blur_axis(v, axis):
        n = v.shape[axis]
        acc = np.zeros_like(v)
        norm = np.zeros(n, dtype=np.float64)
        for i, tap in enumerate(taps):
            d = i - radius
            s0, s1 = max(0, d), max(0, min(n, n + d))
            o0, o1 = max(0, -d), max(0, min(n, n - d))
            if s1 <= s0:
                continue
            src = v[s0:s1] if axis == 0 else v[:, s0:s1]
            if axis == 0:
                acc[o0:o1] += tap * src
            else:
                acc[:, o0:o1] += tap * src
            norm[o0:o1] += tap
        return acc / (norm[:, None] if axis == 0 else norm[None, :])

    v = m.astype(np.float64)
    v = _blur_axis(v, 0)
    v = _blur_axis(v, 1)
    return _finish(v, "gaussian_blur")


def layernorm(x, scale, bias, eps=1e-5):
    """Per-row mean/variance normalization of (N,D) followed by affine scale/bias."""
    x = _as_f32(x, "x")
    scale = _as_f32(scale, "scale")
    bias = _as_f32(bias, "bias")
    if x.ndim != 2:
        raise ShapeError(f"layernorm expects (N,D), got {x.shape}")
    d = x.shape[1]
    if scale.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layernorm scale/bias must have shape ({d},), got {scale.shape} and {bias.shape}"
        )
    v = x.astype(np.float64)
    mean = v.mean(axis=1, keepdims=True)
    centered = v - mean
    var = np.mean(centered * centered, axis=1, keepdims=True)
    out = centered / np.sqrt(var + eps) * scale.astype(np.float64) + bias.astype(np.float64)
    return _finish(out, "layernorm")
