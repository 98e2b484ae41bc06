"""Axis-aligned box algebra shared by the detector and both adaptors.

Boxes are continuous regions ``(x1, y1, x2, y2)``; area is
``(x2 - x1) * (y2 - y1)``. The vectorized helpers take ``(..., 4)`` arrays,
the scalar helpers take :class:`Box`.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from . import kernels

# cap on log-scale deltas before exponentiation (same bound as Faster R-CNN)
MAX_LOG_SCALE = math.log(1000.0 / 16.0)


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


class Offsets(NamedTuple):
    tx: float
    ty: float
    tw: float
    th: float


def as_array(boxes) -> np.ndarray:
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union has zero area."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def pairwise_iou(a, b) -> np.ndarray:
    return kernels.pairwise_iou(as_array(a), as_array(b))


def encode(anchors, gts) -> np.ndarray:
    """RCNN offsets from ``anchors`` to ``gts``, row by row."""
    a = as_array(anchors)
    g = as_array(gts)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    gw, gh = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0) or np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("encode requires boxes with positive width and height")
    out = np.empty((len(a), 4))
    out[:, 0] = ((g[:, 0] + 0.5 * gw) - (a[:, 0] + 0.5 * aw)) / aw
    out[:, 1] = ((g[:, 1] + 0.5 * gh) - (a[:, 1] + 0.5 * ah)) / ah
    out[:, 2] = np.log(gw / aw)
    out[:, 3] = np.log(gh / ah)
    return out


def decode(
    anchors,
    deltas,
    scene: tuple[float, float] | None = None,
    max_log_scale: float | None = None,
) -> np.ndarray:
    """Inverse of :func:`encode`; optionally clipped to ``[0, W] x [0, H]``.

    ``max_log_scale`` caps ``tw``/``th`` before exponentiation; model
    predictions pass :data:`MAX_LOG_SCALE`, exact round trips pass nothing.
    """
    a = as_array(anchors)
    t = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(t)):
        raise ValueError("decode received non-finite offsets")
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("decode requires anchors with positive width and height")
    tw, th = t[:, 2], t[:, 3]
    if max_log_scale is not None:
        tw, th = np.minimum(tw, max_log_scale), np.minimum(th, max_log_scale)
    # shift the anchor's edges rather than rebuilding them from the centre,
    # so zero offsets give back the anchor bit for bit
    gx = 0.5 * (aw * np.exp(tw) - aw)
    gy = 0.5 * (ah * np.exp(th) - ah)
    dx, dy = t[:, 0] * aw, t[:, 1] * ah
    out = np.stack([a[:, 0] + dx - gx, a[:, 1] + dy - gy, a[:, 2] + dx + gx, a[:, 3] + dy + gy], axis=1)
    if scene is not None:
        out = clip(out, scene)
    return out


def clip(boxes, scene: tuple[float, float]) -> np.ndarray:
    b = as_array(boxes).copy()
    width, height = scene
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0.0, width)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0.0, height)
    return b


def enlarge(boxes, factor: float, scene: tuple[float, float]) -> np.ndarray:
    """Scale width and height by ``factor`` about the center, then clip."""
    if factor <= 0:
        raise ValueError("enlarge factor must be positive")
    b = as_array(boxes)
    cx, cy = 0.5 * (b[:, 0] + b[:, 2]), 0.5 * (b[:, 1] + b[:, 3])
    hw, hh = 0.5 * factor * (b[:, 2] - b[:, 0]), 0.5 * factor * (b[:, 3] - b[:, 1])
    return clip(np.stack([cx - hw, cy - hh, cx + hw, cy + hh], axis=1), scene)


def encode_offsets(anchor: Box, gt: Box) -> Offsets:
    return Offsets(*encode([anchor], [gt])[0].tolist())


def decode_offsets(anchor: Box, t: Offsets, scene: tuple[float, float] | None = None) -> Box:
    return Box(*decode([anchor], [t], scene)[0].tolist())


def enlarge_box(b: Box, factor: float, scene: tuple[float, float]) -> Box:
    return Box(*enlarge([b], factor, scene)[0].tolist())


def areas(boxes) -> np.ndarray:
    b = as_array(boxes)
    return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
