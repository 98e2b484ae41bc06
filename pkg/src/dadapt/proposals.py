"""Proposal sets: detector outputs plus optional labels and pseudo labels.

Stored column-wise. Unset optional fields are ``-1`` for class columns and
``NaN`` for box and IoU columns.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Box

_BOX_COLS = ("b_det", "b_gt", "b_reg")
_INT_COLS = ("y_det", "y_gt", "y_cls")


@dataclass
class Proposal:
    scene_id: str
    b_det: Box
    y_det: int
    c_det: float
    y_gt: int | None = None
    b_gt: Box | None = None
    max_iou: float | None = None
    y_cls: int | None = None
    b_reg: Box | None = None


class ProposalSet:
    def __init__(self, scene_ids, b_det, y_det, c_det, y_gt=None, b_gt=None, max_iou=None,
                 y_cls=None, b_reg=None):
        n = len(scene_ids)
        self.scene_ids = np.asarray(scene_ids, dtype=object).reshape(n)
        self.b_det = np.asarray(b_det, dtype=np.float64).reshape(n, 4)
        self.y_det = np.asarray(y_det, dtype=np.int64).reshape(n)
        self.c_det = np.asarray(c_det, dtype=np.float64).reshape(n)
        self.y_gt = _ints(y_gt, n)
        self.b_gt = _boxes(b_gt, n)
        self.max_iou = _floats(max_iou, n)
        self.y_cls = _ints(y_cls, n)
        self.b_reg = _boxes(b_reg, n)

    def __len__(self) -> int:
        return len(self.scene_ids)

    @classmethod
    def empty(cls) -> "ProposalSet":
        return cls([], np.zeros((0, 4)), [], [])

    @classmethod
    def concat(cls, parts: Sequence["ProposalSet"]) -> "ProposalSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
        return cls(cat("scene_ids"), cat("b_det"), cat("y_det"), cat("c_det"), cat("y_gt"),
                   cat("b_gt"), cat("max_iou"), cat("y_cls"), cat("b_reg"))

    def subset(self, mask_or_idx) -> "ProposalSet":
        sel = np.asarray(mask_or_idx)
        return ProposalSet(self.scene_ids[sel], self.b_det[sel], self.y_det[sel], self.c_det[sel],
                           self.y_gt[sel], self.b_gt[sel], self.max_iou[sel], self.y_cls[sel],
                           self.b_reg[sel])

    def copy(self) -> "ProposalSet":
        return self.subset(np.arange(len(self)))

    def groups(self) -> dict[str, np.ndarray]:
        """Row indices per scene id, in first-appearance order."""
        out: dict[str, list[int]] = {}
        for i, sid in enumerate(self.scene_ids):
            out.setdefault(sid, []).append(i)
        return {k: np.asarray(v, dtype=np.int64) for k, v in out.items()}

    def has_b_reg(self) -> np.ndarray:
        return ~np.isnan(self.b_reg[:, 0])

    def __getitem__(self, i: int) -> Proposal:
        opt_box = lambda b: None if math.isnan(b[0]) else Box(*b.tolist())  # noqa: E731
        opt_int = lambda v: None if v < 0 else int(v)  # noqa: E731
        return Proposal(
            scene_id=str(self.scene_ids[i]),
            b_det=Box(*self.b_det[i].tolist()),
            y_det=int(self.y_det[i]),
            c_det=float(self.c_det[i]),
            y_gt=opt_int(self.y_gt[i]),
            b_gt=opt_box(self.b_gt[i]),
            max_iou=None if math.isnan(self.max_iou[i]) else float(self.max_iou[i]),
            y_cls=opt_int(self.y_cls[i]),
            b_reg=opt_box(self.b_reg[i]),
        )

    def to_records(self) -> list[dict]:
        recs = []
        for i in range(len(self)):
            p = self[i]
            rec = {"scene_id": p.scene_id, "box": list(p.b_det), "y_det": p.y_det, "c_det": p.c_det}
            if p.y_gt is not None:
                rec["y_gt"] = p.y_gt
            if p.b_gt is not None:
                rec["b_gt"] = list(p.b_gt)
            if p.max_iou is not None:
                rec["max_iou"] = p.max_iou
            if p.y_cls is not None:
                rec["y_cls"] = p.y_cls
            if p.b_reg is not None:
                rec["b_reg"] = list(p.b_reg)
            recs.append(rec)
        return recs

    @classmethod
    def from_records(cls, recs: Sequence[dict]) -> "ProposalSet":
        n = len(recs)
        if n == 0:
            return cls.empty()
        nan4 = [math.nan] * 4
        return cls(
            [r["scene_id"] for r in recs],
            [r["box"] for r in recs],
            [r["y_det"] for r in recs],
            [r["c_det"] for r in recs],
            [r.get("y_gt", -1) for r in recs],
            [r.get("b_gt", nan4) for r in recs],
            [r.get("max_iou", math.nan) for r in recs],
            [r.get("y_cls", -1) for r in recs],
            [r.get("b_reg", nan4) for r in recs],
        )

    def equals(self, other: "ProposalSet") -> bool:
        if len(self) != len(other) or list(self.scene_ids) != list(other.scene_ids):
            return False
        for name in _BOX_COLS + _INT_COLS + ("c_det", "max_iou"):
            a, b = getattr(self, name), getattr(other, name)
            if not np.array_equal(a, b, equal_nan=a.dtype.kind == "f"):
                return False
        return True


def _ints(v, n):
    return np.full(n, -1, dtype=np.int64) if v is None else np.asarray(v, dtype=np.int64).reshape(n)


def _floats(v, n):
    return np.full(n, np.nan) if v is None else np.asarray(v, dtype=np.float64).reshape(n)


def _boxes(v, n):
    return np.full((n, 4), np.nan) if v is None else np.asarray(v, dtype=np.float64).reshape(n, 4)


def crop_features(props: ProposalSet, images_by_id, boxes: np.ndarray | None = None) -> np.ndarray:
    """Oracle crop features for each proposal, at ``boxes`` (default ``b_det``)."""
    boxes = props.b_det if boxes is None else np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = None
    for sid, idx in props.groups().items():
        f = images_by_id[sid].features(boxes[idx])
        if out is None:
            out = np.empty((len(props), f.shape[1]))
        out[idx] = f
    return np.zeros((0, 0)) if out is None else out


def write_proposals(path: str | Path, props: ProposalSet) -> None:
    with open(path, "w") as fh:
        for rec in props.to_records():
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_proposals(path: str | Path) -> ProposalSet:
    with open(path) as fh:
        return ProposalSet.from_records([json.loads(line) for line in fh if line.strip()])
