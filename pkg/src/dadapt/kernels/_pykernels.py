"""Pure numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` operation for operation (same accumulation
order) so the two backends agree to rounding.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TWO_PI = 6.283185307179586
_INV_2_53 = 1.0 / 9007199254740992.0


def _splitmix(x: np.ndarray) -> np.ndarray:
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order (ties by index)."""
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[pos]:
            continue
        keep.append(i)
        rest = order[pos + 1:]
        if len(rest) == 0:
            break
        ious = pairwise_iou(boxes[i:i + 1], boxes[rest])[0]
        suppressed[pos + 1:] |= ious > iou_thresh
    return np.asarray(keep, dtype=np.int64)


def crop_mix(boxes, obj_boxes, obj_app, bg, power):
    """Mix object appearances and background into one descriptor per crop.

    Returns an ``(N, d + 4)`` array: the appearance mixture followed by the
    visibility-weighted offsets from the crop to the objects it sees.
    """
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    obj_boxes = np.ascontiguousarray(obj_boxes, dtype=np.float64).reshape(-1, 4)
    obj_app = np.ascontiguousarray(obj_app, dtype=np.float64)
    bg = np.ascontiguousarray(bg, dtype=np.float64)
    n, d = len(boxes), bg.shape[0]

    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    area_b = bw * bh
    bcx = boxes[:, 0] + 0.5 * bw
    bcy = boxes[:, 1] + 0.5 * bh

    acc_app = np.zeros((n, d))
    acc_geo = np.zeros((n, 4))
    s_a = np.zeros(n)
    s_v = np.zeros(n)
    covered = np.zeros(n)
    for m in range(len(obj_boxes)):
        ox1, oy1, ox2, oy2 = obj_boxes[m]
        ow, oh = ox2 - ox1, oy2 - oy1
        area_o = ow * oh
        iw = np.minimum(boxes[:, 2], ox2) - np.maximum(boxes[:, 0], ox1)
        ih = np.minimum(boxes[:, 3], oy2) - np.maximum(boxes[:, 1], oy1)
        hit = (iw > 0) & (ih > 0)
        inter = np.where(hit, iw * ih, 0.0)
        iou = inter / (area_b + area_o - inter)
        a = np.where(hit, iou**power, 0.0)
        v = inter / area_o
        acc_app += a[:, None] * obj_app[m][None, :]
        s_a += a
        covered += inter
        # the cue describes only the visible part of the object
        vx1 = np.maximum(boxes[:, 0], ox1)
        vy1 = np.maximum(boxes[:, 1], oy1)
        acc_geo[:, 0] += v * ((vx1 + 0.5 * iw - bcx) / bw)
        acc_geo[:, 1] += v * ((vy1 + 0.5 * ih - bcy) / bh)
        with np.errstate(divide="ignore", invalid="ignore"):
            acc_geo[:, 2] += np.where(hit, v * np.log(iw / bw), 0.0)
            acc_geo[:, 3] += np.where(hit, v * np.log(ih / bh), 0.0)
        s_v += v

    u = np.maximum(0.0, 1.0 - covered / area_b)
    out = np.empty((n, d + 4))
    out[:, :d] = (acc_app + u[:, None] * bg[None, :]) / (s_a + u)[:, None]
    geo_den = s_v + u
    out[:, d:] = acc_geo / geo_den[:, None]
    return out


def hashed_normal(seed: int, boxes: np.ndarray, dim: int) -> np.ndarray:
    """Standard normals keyed by (seed, exact box coordinates, component)."""
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4) + 0.0
    bits = boxes.view(np.uint64)
    h = _splitmix(np.full(len(boxes), seed, dtype=np.uint64))
    for c in range(4):
        h = _splitmix(h ^ bits[:, c])
    out = np.empty((len(boxes), dim))
    for j in range(dim):
        a = _splitmix(h + np.uint64(2 * j + 1))
        b = _splitmix(h + np.uint64(2 * j + 2))
        u1 = ((a >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (b >> np.uint64(11)).astype(np.float64) * _INV_2_53
        out[:, j] = np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)
    return out
