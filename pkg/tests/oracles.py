"""Independent reference computations the tests compare the library against.

Nothing here imports the code under test except plain data types, so a bug
in the package cannot hide behind a shared helper.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

FD_STEP = 1e-5
FD_RTOL = 1e-5
FD_COORDS = 20


def grid_iou(a: Sequence[int], b: Sequence[int]) -> float:
    """IoU by counting unit cells of an integer lattice."""
    def cells(box):
        x1, y1, x2, y2 = (int(v) for v in box)
        return {(x, y) for x in range(x1, x2) for y in range(y1, y2)}

    ca, cb = cells(a), cells(b)
    union = len(ca | cb)
    return 0.0 if union == 0 else len(ca & cb) / union


def smooth_l1(x: float) -> float:
    return 0.5 * x * x if abs(x) < 1 else abs(x) - 0.5


def staircase_ap(tp: Sequence[bool], n_gt: int) -> float:
    """Area under the interpolated PR curve, built segment by segment.

    For every recall level reached by the ranking, the precision used on the
    segment ending there is the best precision at any cutoff whose recall is
    at least that level.
    """
    if n_gt == 0:
        return math.nan
    points = []
    hits = 0
    for k, flag in enumerate(tp, start=1):
        hits += bool(flag)
        points.append((hits / n_gt, hits / k))
    levels = sorted({r for r, _ in points if r > 0})
    area = 0.0
    prev = 0.0
    for r in levels:
        best = max(p for rr, p in points if rr >= r)
        area += (r - prev) * best
        prev = r
    return area


def weighted_bce_loop(d, is_source, w) -> float:
    """Scalar term-by-term domain objective, each domain averaged separately."""
    src = [(di, wi) for di, s, wi in zip(d, is_source, w) if s]
    tgt = [(di, wi) for di, s, wi in zip(d, is_source, w) if not s]
    a = sum(wi * math.log(di) for di, wi in src) / len(src)
    b = sum(wi * math.log(1.0 - di) for di, wi in tgt) / len(tgt)
    return a + b


def sample_coordinates(grads: Sequence[np.ndarray], rng: np.random.Generator, n: int = FD_COORDS):
    """Pick ``n`` (array, flat index) pairs among coordinates with a live gradient."""
    live = [(i, j) for i, g in enumerate(grads) for j in np.flatnonzero(np.abs(g.reshape(-1)) > 1e-7)]
    if not live:
        raise AssertionError("no coordinate carries a gradient")
    pick = rng.choice(len(live), size=min(n, len(live)), replace=False)
    return [live[p] for p in pick]


def finite_difference_errors(value: Callable[[], float], arrays: Sequence[np.ndarray],
                             grads: Sequence[np.ndarray], rng: np.random.Generator,
                             n: int = FD_COORDS, h: float = FD_STEP) -> tuple[list[float], float]:
    """Central differences at ``n`` random coordinates.

    ``arrays`` are perturbed in place and restored. Returns the relative errors
    at coordinates with a nonzero analytic gradient, and the largest finite
    difference seen at coordinates whose analytic gradient is exactly zero.
    """
    errs = []
    for i, j in sample_coordinates(grads, rng, n):
        flat = arrays[i].reshape(-1)
        old = flat[j]
        flat[j] = old + h
        up = value()
        flat[j] = old - h
        down = value()
        flat[j] = old
        num = (up - down) / (2 * h)
        ana = grads[i].reshape(-1)[j]
        errs.append(abs(num - ana) / max(abs(num), abs(ana)))
    dead = 0.0
    for i, g in enumerate(grads):
        zero = np.flatnonzero(g.reshape(-1) == 0.0)
        for j in zero[: 3]:
            flat = arrays[i].reshape(-1)
            old = flat[j]
            flat[j] = old + h
            up = value()
            flat[j] = old - h
            down = value()
            flat[j] = old
            dead = max(dead, abs(up - down) / (2 * h))
    return errs, dead


def box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def greedy_tp(dets, gts, thresh: float = 0.5) -> list[bool]:
    """``dets``: (scene, box, score) for one class; ``gts``: scene -> boxes of that class."""
    taken = {s: [False] * len(b) for s, b in gts.items()}
    flags = []
    for scene, box, _ in sorted(dets, key=lambda d: -d[2]):
        best, best_j = -1.0, -1
        for j, g in enumerate(gts.get(scene, [])):
            if taken[scene][j]:
                continue
            v = box_iou(box, g)
            if v > best:
                best, best_j = v, j
        hit = best >= thresh
        if hit:
            taken[scene][best_j] = True
        flags.append(hit)
    return flags


def random_ap_instance(rng: np.random.Generator, side: int = 12):
    """At most 10 ground truths and 20 detections of one class over two scenes."""
    gts = {}
    for scene in ("a", "b"):
        boxes = []
        for _ in range(int(rng.integers(0, 6))):
            x, y = rng.integers(0, side - 2, size=2)
            w, h = rng.integers(2, 5, size=2)
            boxes.append((float(x), float(y), float(x + w), float(y + h)))
        gts[scene] = boxes
    dets = []
    for _ in range(int(rng.integers(0, 21))):
        scene = "a" if rng.uniform() < 0.5 else "b"
        if gts[scene] and rng.uniform() < 0.6:
            g = gts[scene][int(rng.integers(len(gts[scene])))]
            jit = rng.integers(-1, 2, size=4)
            box = (g[0] + jit[0], g[1] + jit[1], max(g[2] + jit[2], g[0] + jit[0] + 1),
                   max(g[3] + jit[3], g[1] + jit[1] + 1))
        else:
            x, y = rng.integers(0, side - 2, size=2)
            box = (float(x), float(y), float(x + 3), float(y + 3))
        dets.append((scene, tuple(float(v) for v in box), float(rng.uniform())))
    return dets, gts
