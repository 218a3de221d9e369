"""Box geometry: format conversion, IoU / GIoU, regression losses and
coordinate quantization.

Boxes are numpy arrays whose last axis has length 4. Center-format boxes are
``(cx, cy, w, h)`` in normalized image coordinates; corner-format boxes are
``(x1, y1, x2, y2)``. Every function broadcasts over leading axes.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "to_corners",
    "to_center",
    "box_area",
    "iou",
    "giou",
    "quantize",
    "dequantize",
    "l1_loss",
    "giou_loss",
    "l1_loss_grad",
    "giou_loss_grad",
    "hit_rate",
]


def to_corners(box: np.ndarray) -> np.ndarray:
    """Convert ``(cx, cy, w, h)`` to ``(x1, y1, x2, y2)`` clamped to [0, 1]."""
    box = np.asarray(box, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(box, -1, 0)
    corners = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    return np.clip(corners, 0.0, 1.0)


def to_center(corners: np.ndarray) -> np.ndarray:
    """Convert ``(x1, y1, x2, y2)`` to ``(cx, cy, w, h)``."""
    corners = np.asarray(corners, dtype=np.float64)
    x1, y1, x2, y2 = np.moveaxis(corners, -1, 0)
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def box_area(corners: np.ndarray) -> np.ndarray:
    corners = np.asarray(corners, dtype=np.float64)
    w = np.maximum(corners[..., 2] - corners[..., 0], 0.0)
    h = np.maximum(corners[..., 3] - corners[..., 1], 0.0)
    return w * h


def _inter_union_hull(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    wh = np.maximum(rb - lt, 0.0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a) + box_area(b) - inter
    hlt = np.minimum(a[..., :2], b[..., :2])
    hrb = np.maximum(a[..., 2:], b[..., 2:])
    hwh = np.maximum(hrb - hlt, 0.0)
    hull = hwh[..., 0] * hwh[..., 1]
    return inter, union, hull


def iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Intersection over union of corner boxes; 0 where the union is empty."""
    inter, union, _ = _inter_union_hull(a, b)
    safe = np.where(union > 0, union, 1.0)
    return np.where(union > 0, inter / safe, 0.0)


def giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Generalized IoU of corner boxes; 0 where the enclosing hull is empty."""
    inter, union, hull = _inter_union_hull(a, b)
    iou_ = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    safe_hull = np.where(hull > 0, hull, 1.0)
    return np.where(hull > 0, iou_ - (hull - union) / safe_hull, 0.0)


def quantize(box: np.ndarray, n_bins: int) -> np.ndarray:
    """Map each coordinate ``v`` to bin ``min(floor(v * n_bins), n_bins - 1)``."""
    if n_bins < 2:
        raise ValueError(f"n_bins must be >= 2, got {n_bins}")
    v = np.asarray(box, dtype=np.float64)
    bins = np.floor(v * n_bins).astype(np.int64)
    return np.clip(bins, 0, n_bins - 1)


def dequantize(qbox: np.ndarray, n_bins: int) -> np.ndarray:
    """Map bin indices back to bin centers ``(i + 0.5) / n_bins``."""
    if n_bins < 2:
        raise ValueError(f"n_bins must be >= 2, got {n_bins}")
    q = np.asarray(qbox)
    if np.any(q < 0) or np.any(q >= n_bins):
        raise ValueError("bin index out of range")
    return (q.astype(np.float64) + 0.5) / n_bins


def l1_loss(pred: np.ndarray, gold: np.ndarray) -> np.ndarray:
    """Sum of absolute coordinate differences per box (center format)."""
    return np.abs(np.asarray(pred, dtype=np.float64) - gold).sum(axis=-1)


def giou_loss(pred: np.ndarray, gold: np.ndarray) -> np.ndarray:
    """``1 - giou`` of two center-format boxes."""
    return 1.0 - giou(to_corners(pred), to_corners(gold))


def l1_loss_grad(pred: np.ndarray, gold: np.ndarray) -> np.ndarray:
    return np.sign(np.asarray(pred, dtype=np.float64) - gold)


def giou_loss_grad(pred: np.ndarray, gold: np.ndarray) -> np.ndarray:
    """Gradient of ``giou_loss`` with respect to the center-format ``pred``.

    Follows the same branch choices as the forward pass: clamped corners have
    zero derivative, an empty intersection contributes nothing, and ties in
    min/max route the gradient to ``pred``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(pred, -1, 0)
    raw = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    p = np.clip(raw, 0.0, 1.0)
    clip_mask = ((raw >= 0.0) & (raw <= 1.0)).astype(np.float64)
    g = to_corners(gold)

    px1, py1, px2, py2 = np.moveaxis(p, -1, 0)
    gx1, gy1, gx2, gy2 = np.moveaxis(g, -1, 0)

    pw, ph = np.maximum(px2 - px1, 0.0), np.maximum(py2 - py1, 0.0)
    area_p = pw * ph
    area_g = np.maximum(gx2 - gx1, 0.0) * np.maximum(gy2 - gy1, 0.0)

    ix1, iy1 = np.maximum(px1, gx1), np.maximum(py1, gy1)
    ix2, iy2 = np.minimum(px2, gx2), np.minimum(py2, gy2)
    iw_raw, ih_raw = ix2 - ix1, iy2 - iy1
    iw, ih = np.maximum(iw_raw, 0.0), np.maximum(ih_raw, 0.0)
    inter = iw * ih
    union = area_p + area_g - inter

    hx1, hy1 = np.minimum(px1, gx1), np.minimum(py1, gy1)
    hx2, hy2 = np.maximum(px2, gx2), np.maximum(py2, gy2)
    hw, hh = hx2 - hx1, hy2 - hy1
    hull = hw * hh

    valid = (union > 0) & (hull > 0)
    u = np.where(union > 0, union, 1.0)
    hs = np.where(hull > 0, hull, 1.0)

    # giou = inter/union - 1 + union/hull
    d_inter = (u + inter) / u**2 - 1.0 / hs
    d_area_p = -inter / u**2 + 1.0 / hs
    d_hull = -union / hs**2

    iw_on = (iw_raw > 0).astype(np.float64)
    ih_on = (ih_raw > 0).astype(np.float64)
    d_iw = d_inter * ih * iw_on
    d_ih = d_inter * iw * ih_on
    d_hw = d_hull * hh
    d_hh = d_hull * hw

    pos_w = (px2 - px1 > 0).astype(np.float64)
    pos_h = (py2 - py1 > 0).astype(np.float64)
    d_pw = d_area_p * ph * pos_w
    d_ph = d_area_p * pw * pos_h

    d_px1 = -d_pw - d_iw * (px1 >= gx1) - d_hw * (px1 <= gx1)
    d_px2 = d_pw + d_iw * (px2 <= gx2) + d_hw * (px2 >= gx2)
    d_py1 = -d_ph - d_ih * (py1 >= gy1) - d_hh * (py1 <= gy1)
    d_py2 = d_ph + d_ih * (py2 <= gy2) + d_hh * (py2 >= gy2)

    d_corners = np.stack([d_px1, d_py1, d_px2, d_py2], axis=-1) * clip_mask
    d_corners = np.where(valid[..., None], d_corners, 0.0)
    dx1, dy1, dx2, dy2 = np.moveaxis(d_corners, -1, 0)
    d_giou = np.stack([dx1 + dx2, dy1 + dy2, 0.5 * (dx2 - dx1), 0.5 * (dy2 - dy1)], axis=-1)
    return -d_giou


def hit_rate(pred: np.ndarray, gold: np.ndarray, threshold: float = 0.5) -> float:
    """Percentage of center-format predictions whose IoU with gold exceeds ``threshold``."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gold = np.asarray(gold, dtype=np.float64).reshape(-1, 4)
    if len(pred) == 0:
        raise ValueError("empty evaluation set")
    hits = iou(to_corners(pred), to_corners(gold)) > threshold
    return 100.0 * float(hits.mean())
