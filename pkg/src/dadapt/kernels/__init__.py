"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled extension (``_ckernels``) is used when it was built; otherwise
the pure numpy implementations in ``_pykernels`` are used. Both expose

pairwise_iou(a, b)
    IoU matrix between two ``(N, 4)`` / ``(M, 4)`` box arrays.
nms(boxes, scores, iou_thresh)
    Greedy non-maximum suppression, kept indices by descending score.
crop_mix(boxes, obj_boxes, obj_app, bg, power)
    Per-crop appearance mixture and location cue used by the feature oracle.
hashed_normal(seed, boxes, dim)
    Counter-based Gaussian noise keyed by exact box coordinates.
"""
from __future__ import annotations

from types import ModuleType

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_NAMES = ("pairwise_iou", "nms", "crop_mix", "hashed_normal")

BACKEND = ""


def available_backends() -> list[str]:
    return ["python"] + (["compiled"] if _ckernels is not None else [])


def use_backend(name: str) -> None:
    """Rebind the module-level kernel functions to ``name``."""
    global BACKEND
    if name == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        mod: ModuleType = _ckernels
    elif name == "python":
        mod = _pykernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(mod, fn)
    BACKEND = name


def get(name: str, backend: str):
    mod = _ckernels if backend == "compiled" else _pykernels
    if mod is None:
        raise RuntimeError(f"backend {backend!r} unavailable")
    return getattr(mod, name)


use_backend("compiled" if _ckernels is not None else "python")
