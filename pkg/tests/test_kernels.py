"""The compiled kernels and the numpy fallback must agree."""
from __future__ import annotations

import numpy as np
import pytest

from dadapt import kernels

BACKENDS = kernels.available_backends()
compiled_only = pytest.mark.skipif("compiled" not in BACKENDS, reason="compiled kernels not built")


def _boxes(rng: np.random.Generator, n: int, side: float = 64.0) -> np.ndarray:
    xy = rng.uniform(0, side, size=(n, 2))
    wh = rng.uniform(1, side / 3, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def test_fallback_is_always_available() -> None:
    assert "python" in BACKENDS
    assert kernels.BACKEND in BACKENDS


def test_unknown_backend_rejected() -> None:
    with pytest.raises(ValueError):
        kernels.use_backend("gpu")


@pytest.mark.parametrize("backend", BACKENDS)
def test_nms_keeps_one_of_duplicates(backend: str) -> None:
    nms = kernels.get("nms", backend)
    boxes = np.array([[0, 0, 10, 10]] * 3 + [[20, 20, 30, 30]], dtype=float)
    keep = nms(boxes, np.array([0.5, 0.9, 0.7, 0.1]), 0.5)
    assert keep.tolist() == [1, 3]


@pytest.mark.parametrize("backend", BACKENDS)
def test_nms_survivors_do_not_overlap(backend: str) -> None:
    nms = kernels.get("nms", backend)
    iou = kernels.get("pairwise_iou", backend)
    rng = np.random.default_rng(0)
    boxes = _boxes(rng, 200)
    keep = nms(boxes, rng.uniform(size=200), 0.4)
    m = iou(boxes[keep], boxes[keep])
    np.fill_diagonal(m, 0.0)
    assert m.max() <= 0.4


@compiled_only
def test_pairwise_iou_parity() -> None:
    rng = np.random.default_rng(1)
    a, b = _boxes(rng, 50), _boxes(rng, 70)
    got = kernels.get("pairwise_iou", "compiled")(a, b)
    want = kernels.get("pairwise_iou", "python")(a, b)
    assert np.abs(got - want).max() < 1e-15


@compiled_only
def test_nms_parity() -> None:
    rng = np.random.default_rng(2)
    boxes = _boxes(rng, 300)
    scores = np.round(rng.uniform(size=300), 2)  # ties exercise the ordering rule
    for t in (0.3, 0.5, 0.7):
        c = kernels.get("nms", "compiled")(boxes, scores, t)
        p = kernels.get("nms", "python")(boxes, scores, t)
        assert c.tolist() == p.tolist()


@compiled_only
def test_crop_mix_parity() -> None:
    rng = np.random.default_rng(3)
    crops = _boxes(rng, 100)
    objs = _boxes(rng, 3)
    app = rng.normal(size=(3, 8))
    bg = rng.normal(size=8)
    c = kernels.get("crop_mix", "compiled")(crops, objs, app, bg, 2.0)
    p = kernels.get("crop_mix", "python")(crops, objs, app, bg, 2.0)
    assert np.allclose(c, p, rtol=1e-12, atol=1e-12)


@compiled_only
def test_hashed_normal_parity_and_moments() -> None:
    rng = np.random.default_rng(4)
    boxes = _boxes(rng, 2000)
    c = kernels.get("hashed_normal", "compiled")(12345, boxes, 16)
    p = kernels.get("hashed_normal", "python")(12345, boxes, 16)
    assert np.allclose(c, p, rtol=1e-12, atol=1e-12)
    assert abs(p.mean()) < 0.02
    assert abs(p.std() - 1.0) < 0.02


@pytest.mark.parametrize("backend", BACKENDS)
def test_hashed_normal_keyed_by_box(backend: str) -> None:
    fn = kernels.get("hashed_normal", backend)
    b = np.array([[1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0000001]])
    out = fn(7, b, 4)
    assert np.array_equal(out[0], fn(7, b[:1], 4)[0])
    assert not np.array_equal(out[0], out[1])
    assert not np.array_equal(out[0], fn(8, b[:1], 4)[0])
