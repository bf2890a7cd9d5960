"""Normalized box algebra for crop actions.

Boxes are ``(y_min, x_min, y_max, x_max)``. Every function accepts either a
:class:`BBox` or an array whose last axis has length 4, and batches over the
leading axes.
"""
from typing import NamedTuple

import numpy as np

N_BINS = 64
BIN_LOW = -3.5
BIN_HIGH = 4.5
BIN_WIDTH = (BIN_HIGH - BIN_LOW) / N_BINS
IDENTITY = (0.0, 0.0, 1.0, 1.0)


class BBox(NamedTuple):
    y_min: float
    x_min: float
    y_max: float
    x_max: float

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def area(self):
        return self.height * self.width


RelAction = BBox


class GeometryError(ValueError):
    pass


def _arr(b):
    return np.asarray(b, dtype=np.float64)


def _check_extent(b, what="source box"):
    b = _arr(b)
    if np.any(b[..., 2] - b[..., 0] <= 0) or np.any(b[..., 3] - b[..., 1] <= 0):
        raise GeometryError(f"degenerate {what}: non-positive extent")
    return b


def _out(res, like):
    if isinstance(like, tuple) and np.ndim(res) == 1:
        return BBox(*map(float, res))
    return res


def relative_bbox(src, dst):
    """Coordinates of ``dst`` in the frame of ``src``."""
    s = _check_extent(src)
    d = _arr(dst)
    h = (s[..., 2] - s[..., 0])[..., None]
    w = (s[..., 3] - s[..., 1])[..., None]
    origin = np.stack([s[..., 0], s[..., 1], s[..., 0], s[..., 1]], axis=-1)
    scale = np.concatenate([h, w, h, w], axis=-1)
    return _out((d - origin) / scale, src)


def apply_action(src, action, clip=False):
    """Inverse of :func:`relative_bbox`; ``clip`` clamps the result to [0, 1]."""
    s = _check_extent(src)
    a = _arr(action)
    h = (s[..., 2] - s[..., 0])[..., None]
    w = (s[..., 3] - s[..., 1])[..., None]
    origin = np.stack([s[..., 0], s[..., 1], s[..., 0], s[..., 1]], axis=-1)
    scale = np.concatenate([h, w, h, w], axis=-1)
    out = origin + a * scale
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return _out(out, src)


def iou(b1, b2):
    a = _arr(b1)
    b = _arr(b2)
    ih = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    iw = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = ih * iw
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    res = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return float(res) if np.ndim(res) == 0 else res


def discretize_action(action):
    """Map each coordinate to one of 64 bins over [-3.5, 4.5); clamps out-of-range."""
    a = _arr(action)
    idx = np.floor((a - BIN_LOW) / BIN_WIDTH)
    return np.clip(idx, 0, N_BINS - 1).astype(np.int64)


def continuize(tokens):
    """Bin centres for a token array."""
    t = np.asarray(tokens, dtype=np.float64)
    return BIN_LOW + (t + 0.5) * BIN_WIDTH


IDENTITY_TOKENS = tuple(int(t) for t in discretize_action(IDENTITY))


def pairwise_relative(boxes):
    """(..., N, 4) boxes -> (..., N, N, 4) where [..., j, k] maps box j to box k."""
    b = _arr(boxes)
    return relative_bbox(b[..., :, None, :], b[..., None, :, :])


def pairwise_iou(boxes):
    b = _arr(boxes)
    return iou(b[..., :, None, :], b[..., None, :, :])


# ------------------------------------------------------------------ sampling

def _check_ranges(scale_range, ratio_range):
    s0, s1 = scale_range
    r0, r1 = ratio_range
    if not (0 < s0 <= s1 <= 1):
        raise GeometryError(f"invalid scale range {scale_range!r}")
    if not (0 < r0 <= r1):
        raise GeometryError(f"invalid ratio range {ratio_range!r}")


def sample_crops(rng, n, scale_range=(0.05, 0.5), ratio_range=(3 / 4, 4 / 3),
                 attempts=10, min_side=0.0):
    """Random-resized-crop boxes, shape (n, 4).

    Area fraction is uniform in ``scale_range``, aspect ratio (w/h) log-uniform in
    ``ratio_range``, placement uniform among feasible positions. A draw is
    infeasible if a side exceeds 1 or falls below ``min_side``; after
    ``attempts`` failed draws a centred crop at ``scale_range[0]`` is used.
    """
    _check_ranges(scale_range, ratio_range)
    area = rng.uniform(scale_range[0], scale_range[1], size=(n, attempts))
    log_r = rng.uniform(np.log(ratio_range[0]), np.log(ratio_range[1]), size=(n, attempts))
    pos = rng.uniform(0.0, 1.0, size=(n, attempts, 2))
    ratio = np.exp(log_r)
    w = np.sqrt(area * ratio)
    h = np.sqrt(area / ratio)
    ok = (w <= 1.0) & (h <= 1.0) & (w >= min_side) & (h >= min_side)
    first = np.argmax(ok, axis=1)
    found = ok[np.arange(n), first]
    rows = np.arange(n)
    h_sel = h[rows, first]
    w_sel = w[rows, first]
    y0 = pos[rows, first, 0] * (1.0 - h_sel)
    x0 = pos[rows, first, 1] * (1.0 - w_sel)
    side = np.sqrt(scale_range[0])
    fallback = np.array([0.5 - side / 2, 0.5 - side / 2, 0.5 + side / 2, 0.5 + side / 2])
    out = np.stack([y0, x0, y0 + h_sel, x0 + w_sel], axis=-1)
    out[~found] = fallback
    return out


def sample_crop(rng, scale_range=(0.05, 0.5), ratio_range=(3 / 4, 4 / 3), min_side=0.0):
    return BBox(*map(float, sample_crops(rng, 1, scale_range, ratio_range, min_side=min_side)[0]))
