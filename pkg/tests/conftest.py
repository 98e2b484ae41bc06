from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dadapt import detector as det  # noqa: E402
from dadapt import synthworld as sw  # noqa: E402

K = 3


@dataclass
class Mini:
    """A small benchmark with a briefly pretrained detector and its proposals."""

    bench: sw.Benchmark
    src_images: list
    tgt_images: list
    src_gt: dict
    tgt_gt: dict
    cache: det.AnchorCache
    model: det.DetectorModel
    props_s: object
    props_t: object

    @property
    def images_by_id(self) -> dict:
        return {im.id: im for im in self.src_images + self.tgt_images}


@pytest.fixture(scope="session")
def mini() -> Mini:
    bench = sw.Benchmark.build(sw.WorldConfig(n_source=30, n_target=30, seed=1))
    si = sw.images(bench.source, bench.world.oracle)
    ti = sw.images(bench.target, bench.world.oracle)
    gs, gt = sw.ground_truth(bench.source), sw.ground_truth(bench.target)
    cache = det.AnchorCache(det.AnchorGrid())
    cfg = det.DetectorConfig(steps=1500)
    model, _ = det.pretrain_source(si, gs, cfg, seed=0, cache=cache)
    props_s = det.label_source_proposals(det.propose(model, si, cache=cache), gs, K)
    props_t = det.propose(model, ti, cache=cache)
    return Mini(bench, si, ti, gs, gt, cache, model, props_s, props_t)
