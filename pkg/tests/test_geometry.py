from __future__ import annotations

import math

import numpy as np
import pytest

from dadapt.geometry import (
    Box,
    Offsets,
    decode,
    decode_offsets,
    encode,
    encode_offsets,
    enlarge_box,
    iou,
    pairwise_iou,
)

import oracles


def _random_int_box(rng: np.random.Generator, side: int = 20) -> tuple[int, int, int, int]:
    x1, x2 = sorted(rng.choice(side + 1, size=2, replace=False))
    y1, y2 = sorted(rng.choice(side + 1, size=2, replace=False))
    return int(x1), int(y1), int(x2), int(y2)


def test_iou_examples() -> None:
    a = Box(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, Box(5, 5, 6, 6)) == 0.0
    assert iou(a, Box(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
    assert oracles.grid_iou((0, 0, 2, 2), (1, 1, 3, 3)) == 1 / 7


def test_iou_zero_union_is_zero() -> None:
    p = Box(1, 1, 1, 1)
    assert iou(p, p) == 0.0
    assert pairwise_iou([p], [p])[0, 0] == 0.0


def test_iou_matches_grid_counting_on_lattice() -> None:
    rng = np.random.default_rng(7)
    for _ in range(1000):
        a, b = _random_int_box(rng), _random_int_box(rng)
        want = oracles.grid_iou(a, b)
        assert iou(Box(*a), Box(*b)) == want
        assert pairwise_iou([a], [b])[0, 0] == want


def test_encode_examples() -> None:
    assert encode_offsets(Box(0, 0, 10, 10), Box(0, 0, 10, 10)) == Offsets(0, 0, 0, 0)
    assert encode_offsets(Box(0, 0, 10, 10), Box(5, 5, 15, 15)) == Offsets(0.5, 0.5, 0.0, 0.0)


def test_decode_examples() -> None:
    a = Box(0, 0, 10, 10)
    assert decode_offsets(a, Offsets(0, 0, 0, 0)) == a
    assert decode_offsets(a, Offsets(0.5, 0.5, 0, 0)) == Box(5, 5, 15, 15)
    wide = decode_offsets(Box(2, 0, 6, 4), Offsets(0, 0, math.log(2), 0))
    assert wide.width == pytest.approx(8.0)
    assert (wide.x1 + wide.x2) / 2 == pytest.approx(4.0)
    assert decode_offsets(a, Offsets(0.5, 0.5, 0, 0), scene=(12, 12)) == Box(5, 5, 12, 12)


def test_zero_offsets_decode_bit_exactly() -> None:
    rng = np.random.default_rng(11)
    xy = rng.uniform(0, 100, size=(500, 2))
    boxes = np.c_[xy, xy + rng.uniform(0.5, 40, size=(500, 2))]
    assert np.array_equal(decode(boxes, np.zeros((500, 4))), boxes)


def test_encode_rejects_degenerate_boxes() -> None:
    with pytest.raises(ValueError):
        encode([[0, 0, 0, 5]], [[0, 0, 4, 4]])
    with pytest.raises(ValueError):
        encode([[0, 0, 4, 4]], [[1, 1, 1, 3]])


def test_decode_rejects_non_finite_offsets() -> None:
    with pytest.raises(ValueError):
        decode([[0, 0, 4, 4]], [[0, np.nan, 0, 0]])
    with pytest.raises(ValueError):
        decode([[0, 0, 4, 4]], [[0, 0, np.inf, 0]])


def test_round_trip_on_random_pairs() -> None:
    rng = np.random.default_rng(11)
    n = 10_000
    xy = rng.uniform(-50, 50, size=(2, n, 2))
    wh = rng.uniform(0.5, 40, size=(2, n, 2))
    anchors = np.concatenate([xy[0], xy[0] + wh[0]], axis=1)
    gts = np.concatenate([xy[1], xy[1] + wh[1]], axis=1)
    back = decode(anchors, encode(anchors, gts))
    assert np.abs(back - gts).max() < 1e-9


def test_enlarge_examples() -> None:
    assert enlarge_box(Box(4, 4, 6, 6), 1.0, (10, 10)) == Box(4, 4, 6, 6)
    assert enlarge_box(Box(4, 4, 6, 6), 2.0, (10, 10)) == Box(3, 3, 7, 7)
    assert enlarge_box(Box(0, 0, 6, 6), 2.0, (10, 10)) == Box(0, 0, 9, 9)
    with pytest.raises(ValueError):
        enlarge_box(Box(0, 0, 1, 1), 0.0, (10, 10))
