"""Corner-format box geometry in normalized coordinates.

Boxes are ``(xmin, ymin, xmax, ymax)`` with every coordinate in [0, 1].
Vectorized helpers take ``(N, 4)`` float arrays.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DataValidationError, NumericalError

Box = tuple[float, float, float, float]


def validate_box(box: Sequence[float]) -> Box:
    xmin, ymin, xmax, ymax = (float(v) for v in box)
    if not (0.0 <= xmin < xmax <= 1.0 and 0.0 <= ymin < ymax <= 1.0):
        raise DataValidationError(f"invalid normalized box {tuple(box)}")
    return xmin, ymin, xmax, ymax


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two corner boxes, in [0, 1]."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def to_center(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    wh = boxes[..., 2:] - boxes[..., :2]
    return np.concatenate([boxes[..., :2] + wh / 2, wh], axis=-1)


def to_corner(centers: np.ndarray) -> np.ndarray:
    centers = np.asarray(centers, dtype=np.float64)
    half = centers[..., 2:] / 2
    return np.concatenate([centers[..., :2] - half, centers[..., :2] + half], axis=-1)


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Center-size offsets ``(dcx, dcy, dw, dh)`` of ``gt`` relative to ``anchors``.

    Works on single boxes or ``(N, 4)`` arrays. A zero-width or zero-height
    anchor raises :class:`NumericalError`.
    """
    g = to_center(gt)
    a = to_center(anchors)
    if np.any(a[..., 2:] <= 0):
        raise NumericalError("anchor with zero width or height")
    return np.concatenate(
        [(g[..., :2] - a[..., :2]) / a[..., 2:], np.log(g[..., 2:] / a[..., 2:])],
        axis=-1,
    )


def decode_boxes(offsets: np.ndarray, anchors: np.ndarray, clip: bool = True) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; output clipped to [0, 1] by default."""
    offsets = np.asarray(offsets, dtype=np.float64)
    if not np.all(np.isfinite(offsets)):
        raise NumericalError("non-finite box offsets")
    a = to_center(anchors)
    with np.errstate(over="raise"):
        try:
            wh = a[..., 2:] * np.exp(offsets[..., 2:])
        except FloatingPointError as exc:
            raise NumericalError("box offsets overflow on decode") from exc
    centers = np.concatenate([a[..., :2] + offsets[..., :2] * a[..., 2:], wh], axis=-1)
    boxes = to_corner(centers)
    if clip:
        boxes = np.clip(boxes, 0.0, 1.0)
    return boxes


def encode_box(gt: Sequence[float], anchor: Sequence[float]) -> tuple[float, float, float, float]:
    return tuple(float(v) for v in encode_boxes(np.asarray(gt), np.asarray(anchor)))


def decode_box(offsets: Sequence[float], anchor: Sequence[float]) -> Box:
    return tuple(float(v) for v in decode_boxes(np.asarray(offsets), np.asarray(anchor)))
