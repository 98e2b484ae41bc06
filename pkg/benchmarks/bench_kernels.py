"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs on inputs shaped like one reference scene (768 anchors,
a handful of objects) and the script also times proposal generation over
a few scenes with each backend switched in.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from dadapt import detector as det
from dadapt import kernels
from dadapt import synthworld as sw


def _inputs(rng: np.random.Generator):
    anchors = det.AnchorGrid().anchors((128.0, 128.0))
    xy = rng.uniform(0, 100, size=(4, 2))
    objects = np.c_[xy, xy + rng.uniform(10, 28, size=(4, 2))]
    app = rng.normal(size=(4, 8))
    bg = rng.normal(size=8)
    scores = rng.uniform(size=len(anchors))
    return anchors, objects, app, bg, scores


def _cases(anchors, objects, app, bg, scores):
    return {
        "pairwise_iou": lambda k: k(anchors, anchors[:200]),
        "nms": lambda k: k(anchors, scores, 0.7),
        "crop_mix": lambda k: k(anchors, objects, app, bg, 2.0),
        "hashed_normal": lambda k: k(7, anchors, 24),
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--number", type=int, default=20)
    args = parser.parse_args()

    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled kernels are not built; only the numpy fallback is timed")
    cases = _cases(*_inputs(np.random.default_rng(0)))
    print(f"{'kernel':<16}" + "".join(f"{b + ' (ms)':>16}" for b in backends) + f"{'speed-up':>12}")
    for name, call in cases.items():
        ms = []
        for b in backends:
            fn = kernels.get(name, b)
            t = min(timeit.repeat(lambda: call(fn), number=args.number, repeat=args.repeat))
            ms.append(1e3 * t / args.number)
        ratio = f"{ms[0] / ms[-1]:>11.1f}x" if len(ms) > 1 else ""
        print(f"{name:<16}" + "".join(f"{m:>16.3f}" for m in ms) + ratio)

    bench = sw.Benchmark.build(sw.WorldConfig(n_source=10, n_target=0, seed=0))
    imgs = sw.images(bench.source, bench.world.oracle)
    model = det.DetectorModel.create(det.DetectorConfig(), np.random.default_rng(0))
    print()
    for b in backends:
        kernels.use_backend(b)
        t = min(timeit.repeat(lambda: det.propose(model, imgs), number=1, repeat=args.repeat))
        print(f"propose, 10 scenes, {b:<9} {1e3 * t:9.1f} ms")


if __name__ == "__main__":
    main()
