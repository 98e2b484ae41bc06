"""Detection and adaptor metrics.

* :func:`average_precision` / :func:`mean_average_precision`: VOC all-point AP
  at an IoU threshold.
* :func:`miou_cls`: mean over classes (background included) of the
  per-class IoU of a confusion matrix.
* :func:`miou_reg`: mean box IoU over paired predictions and ground truths.
* :func:`error_analysis`: Miss / Cls / Loc / correct split over ground truths.
* :func:`iou_histogram`: IoU distribution of labelled proposals above a
  confidence threshold, with CSV and SVG writers.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box, pairwise_iou

GroundTruth = Mapping[str, tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class DetectionResult:
    scene_id: str
    box: Box
    cls: int
    score: float


def _match(results: Sequence[DetectionResult], gts: GroundTruth, k: int, iou_thresh: float):
    """Greedy score-order matching for class ``k``; returns (tp flags, n_gt)."""
    dets = sorted((r for r in results if r.cls == k), key=lambda r: -r.score)
    gt_boxes = {}
    n_gt = 0
    for sid, (boxes, classes) in gts.items():
        b = boxes[classes == k]
        gt_boxes[sid] = b
        n_gt += len(b)
    taken = {sid: np.zeros(len(b), dtype=bool) for sid, b in gt_boxes.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for i, d in enumerate(dets):
        b = gt_boxes.get(d.scene_id)
        if b is None or len(b) == 0:
            continue
        ious = pairwise_iou([d.box], b)[0]
        ious[taken[d.scene_id]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh:
            tp[i] = True
            taken[d.scene_id][j] = True
    return tp, n_gt


def ap_from_flags(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated area under the precision/recall staircase."""
    if n_gt == 0:
        return math.nan
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def average_precision(results: Sequence[DetectionResult], gts: GroundTruth, k: int,
                      iou_thresh: float = 0.5) -> float:
    """AP for class ``k``; NaN when the class has no ground truth at all.

    Detections are matched in score order to the best still-unmatched ground
    truth of the same class with IoU >= ``iou_thresh``; anything else,
    duplicates included, is a false positive.
    """
    tp, n_gt = _match(results, gts, k, iou_thresh)
    return ap_from_flags(tp, n_gt)


def mean_average_precision(results, gts: GroundTruth, n_classes: int, iou_thresh: float = 0.5):
    per_class = [average_precision(results, gts, k, iou_thresh) for k in range(n_classes)]
    valid = [a for a in per_class if not math.isnan(a)]
    return (float(np.mean(valid)) if valid else 0.0), per_class


@dataclass
class ConfusionCounts:
    n: np.ndarray

    @property
    def t(self) -> np.ndarray:
        return self.n.sum(axis=1)

    @classmethod
    def from_labels(cls, true, pred, n_labels: int) -> "ConfusionCounts":
        m = np.zeros((n_labels, n_labels), dtype=np.int64)
        np.add.at(m, (np.asarray(true, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
        return cls(m)


def per_class_iou(c: ConfusionCounts) -> tuple[np.ndarray, np.ndarray]:
    """Class-wise ``n_ii / (t_i + sum_j n_ji - n_ii)`` and a zero-denominator flag."""
    n = np.asarray(c.n, dtype=np.float64)
    diag = np.diag(n)
    denom = n.sum(axis=1) + n.sum(axis=0) - diag
    empty = denom == 0
    iou = np.divide(diag, denom, out=np.zeros_like(diag), where=~empty)
    return iou, empty


def miou_cls(c: ConfusionCounts) -> float:
    iou, _ = per_class_iou(c)
    return float(iou.mean())


def miou_reg(pred_boxes, gt_boxes) -> float:
    pred = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(pred) != len(gt):
        raise ValueError(f"miou_reg needs paired lists, got {len(pred)} and {len(gt)}")
    if len(pred) == 0:
        return math.nan
    ious = [pairwise_iou(pred[i:i + 1], gt[i:i + 1])[0, 0] for i in range(len(pred))]
    return float(np.mean(ious))


@dataclass
class ErrorBreakdown:
    miss: float = 0.0
    cls: float = 0.0
    loc: float = 0.0
    correct: float = 0.0
    n: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def error_analysis(results: Sequence[DetectionResult], gts: GroundTruth, iou_thresh: float = 0.5,
                   loc_low: float = 0.1, score_thresh: float = 0.5) -> ErrorBreakdown:
    """Assign each ground truth to exactly one outcome.

    Considering detections with score >= ``score_thresh`` in the same scene:
    correct if one has the right class and IoU >= ``iou_thresh``; otherwise
    Cls if one overlaps at IoU >= ``iou_thresh`` with a wrong class; otherwise
    Loc if one has the right class and ``loc_low <= IoU < iou_thresh``;
    otherwise Miss.
    """
    by_scene: dict[str, list[DetectionResult]] = {}
    for r in results:
        if r.score >= score_thresh:
            by_scene.setdefault(r.scene_id, []).append(r)
    counts = {"miss": 0, "cls": 0, "loc": 0, "correct": 0}
    total = 0
    for sid, (boxes, classes) in gts.items():
        dets = by_scene.get(sid, [])
        if len(boxes) == 0:
            continue
        if dets:
            ious = pairwise_iou(boxes, [d.box for d in dets])
            dcls = np.array([d.cls for d in dets])
        for g in range(len(boxes)):
            total += 1
            if not dets:
                counts["miss"] += 1
                continue
            same = dcls == classes[g]
            row = ious[g]
            if np.any(same & (row >= iou_thresh)):
                counts["correct"] += 1
            elif np.any(~same & (row >= iou_thresh)):
                counts["cls"] += 1
            elif np.any(same & (row >= loc_low)):
                counts["loc"] += 1
            else:
                counts["miss"] += 1
    if total == 0:
        return ErrorBreakdown()
    return ErrorBreakdown(counts["miss"] / total, counts["cls"] / total, counts["loc"] / total,
                          counts["correct"] / total, total)


@dataclass
class IoUHistogram:
    edges: np.ndarray
    counts: np.ndarray
    threshold: float

    def undefined_count(self, lo: float = 0.3, hi: float = 0.7) -> int:
        """Proposals in bins lying inside ``(lo, hi)``."""
        mids = 0.5 * (self.edges[:-1] + self.edges[1:])
        return int(self.counts[(mids > lo) & (mids < hi)].sum())

    def to_csv(self) -> str:
        lines = ["bin_lo,bin_hi,count"]
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            lines.append(f"{lo:.4f},{hi:.4f},{int(c)}")
        return "\n".join(lines) + "\n"

    def to_svg(self, title: str = "IoU distribution", width: int = 400, height: int = 240) -> str:
        pad = 30
        n = len(self.counts)
        top = max(int(self.counts.max()) if n else 0, 1)
        bw = (width - 2 * pad) / max(n, 1)
        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
            f'<text x="{pad}" y="18" font-size="12">{title} (c &gt;= {self.threshold:.2f})</text>',
            f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        ]
        for i, c in enumerate(self.counts):
            h = (height - 2 * pad) * int(c) / top
            x = pad + i * bw
            parts.append(f'<rect x="{x:.2f}" y="{height - pad - h:.2f}" width="{bw - 1:.2f}" '
                         f'height="{h:.2f}" fill="steelblue"/>')
        for e in (0.0, 0.5, 1.0):
            x = pad + e * (width - 2 * pad)
            parts.append(f'<text x="{x:.2f}" y="{height - pad + 14}" font-size="10">{e:.1f}</text>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"


def iou_histogram(max_iou, c_det, bins: int = 10, confidence_threshold: float = 0.0) -> IoUHistogram:
    max_iou = np.asarray(max_iou, dtype=np.float64)
    c_det = np.asarray(c_det, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    sel = max_iou[c_det >= confidence_threshold]
    counts, _ = np.histogram(sel, bins=edges)
    return IoUHistogram(edges, counts.astype(np.int64), confidence_threshold)


@dataclass
class MetricsReport:
    per_class_ap: list[float]
    map: float
    miou_cls: float | None = None
    miou_reg: float | None = None
    error_breakdown: dict = field(default_factory=dict)
    histogram_path: str | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and math.isnan(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v

        doc = {
            "per_class_ap": clean(self.per_class_ap),
            "map": clean(self.map),
            "miou_cls": clean(self.miou_cls),
            "miou_reg": clean(self.miou_reg),
            "error_breakdown": clean(self.error_breakdown),
            "histogram_path": self.histogram_path,
        }
        if self.extra:
            doc["extra"] = clean(self.extra)
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())
