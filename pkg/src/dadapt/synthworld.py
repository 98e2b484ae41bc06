"""Two-domain synthetic detection benchmark.

A scene is a ``width x height`` canvas holding a few boxed objects. Each
object carries an appearance vector drawn around its class prototype; the
canvas carries a background vector. Target scenes push every appearance
(objects and background) through a rotation-like map plus bias, a
semantic-level shift.

:class:`FeatureOracle` plays the role of a backbone: a crop's feature is the
IoU^p-weighted mixture of the appearances it overlaps (background weighted
by the uncovered fraction of the crop), concatenated with a location cue,
sent through a fixed random projection, plus Gaussian noise keyed by the
scene and the exact crop coordinates.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, PlacementError
from .geometry import Box, pairwise_iou
from .rng import derive_rng

SOURCE, TARGET = "source", "target"
_DOMAIN_KEY = {SOURCE: 0, TARGET: 1}


@dataclass(frozen=True)
class WorldConfig:
    n_classes: int = 3
    d_app: int = 8
    d_feat: int = 16
    n_source: int = 200
    n_target: int = 200
    width: float = 128.0
    height: float = 128.0
    min_objects: int = 1
    max_objects: int = 3
    overlap_cap: float = 0.3
    size_range_source: tuple[float, float] = (12.0, 24.0)
    size_range_target: tuple[float, float] = (12.0, 24.0)
    class_prior_source: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    class_prior_target: tuple[float, ...] = (0.4, 0.3, 0.3)
    prototype_scale: float = 1.0
    appearance_sigma: float = 0.3
    background_sigma: float = 1.0
    noise_sigma_source: float = 0.1
    noise_sigma_target: float = 0.1
    shift_angle: float = 0.6
    shift_bias: float = 0.3
    location_scale: float = 6.0
    iou_power: float = 2.0
    placement_retries: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if self.n_source < 0 or self.n_target < 0:
            raise ConfigError("scene counts must be non-negative")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        for name in ("class_prior_source", "class_prior_target"):
            prior = getattr(self, name)
            if len(prior) != self.n_classes or abs(sum(prior) - 1.0) > 1e-9 or min(prior) < 0:
                raise ConfigError(f"{name} must be a distribution over {self.n_classes} classes")
        for name in ("size_range_source", "size_range_target"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi <= min(self.width, self.height):
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi <= scene size")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "WorldConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown world config keys: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class ObjectInstance:
    cls: int
    box: Box
    appearance: np.ndarray


@dataclass
class Scene:
    id: str
    domain: str
    width: float
    height: float
    objects: list[ObjectInstance]
    background_vec: np.ndarray
    noise_seed: int

    @property
    def size(self) -> tuple[float, float]:
        return (self.width, self.height)

    def gt_boxes(self) -> np.ndarray:
        return np.array([o.box for o in self.objects], dtype=np.float64).reshape(-1, 4)

    def gt_classes(self) -> np.ndarray:
        return np.array([o.cls for o in self.objects], dtype=np.int64)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "domain": self.domain,
            "width": self.width,
            "height": self.height,
            "objects": [
                {"cls": o.cls, "x1": o.box.x1, "y1": o.box.y1, "x2": o.box.x2, "y2": o.box.y2,
                 "appearance": o.appearance.tolist()}
                for o in self.objects
            ],
            "background_vec": self.background_vec.tolist(),
            "noise_seed": self.noise_seed,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Scene":
        objs = [
            ObjectInstance(int(o["cls"]), Box(o["x1"], o["y1"], o["x2"], o["y2"]),
                           np.asarray(o["appearance"], dtype=np.float64))
            for o in rec["objects"]
        ]
        return cls(rec["id"], rec["domain"], rec["width"], rec["height"], objs,
                   np.asarray(rec["background_vec"], dtype=np.float64), int(rec["noise_seed"]))


@dataclass
class DomainSpec:
    appearance_map: np.ndarray
    bias: np.ndarray
    noise_sigma: dict[str, float]
    class_prior: dict[str, tuple[float, ...]]
    size_range: dict[str, tuple[float, float]]

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.appearance_map))


@dataclass
class World:
    """Everything derived from ``(cfg, seed)`` besides the scenes themselves."""

    cfg: WorldConfig
    prototypes: np.ndarray          # (K, d_app)
    background_proto: np.ndarray    # (d_app,)
    domains: DomainSpec
    oracle: "FeatureOracle"
    class_offset: dict[str, float]


class FeatureOracle:
    """Deterministic crop -> feature map standing in for a CNN backbone."""

    def __init__(self, projection: np.ndarray, noise_sigma: dict[str, float],
                 power: float = 2.0, location_scale: float = 1.0):
        self.projection = projection
        self.noise_sigma = dict(noise_sigma)
        self.power = power
        self.location_scale = location_scale

    @property
    def d_feat(self) -> int:
        return self.projection.shape[0]

    def describe(self, scene: Scene, boxes) -> np.ndarray:
        """Noise-free pre-projection descriptor ``[mixture, location cue]``."""
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
            raise ValueError("crop boxes must have positive area")
        if scene.objects:
            obj_boxes = scene.gt_boxes()
            obj_app = np.stack([o.appearance for o in scene.objects])
        else:
            obj_boxes = np.zeros((0, 4))
            obj_app = np.zeros((0, len(scene.background_vec)))
        z = kernels.crop_mix(boxes, obj_boxes, obj_app, scene.background_vec, self.power)
        z[:, -4:] *= self.location_scale
        return z

    def features(self, scene: Scene, boxes, noise: bool = True) -> np.ndarray:
        z = self.describe(scene, boxes)
        out = z @ self.projection.T
        sigma = self.noise_sigma.get(scene.domain, 0.0)
        if noise and sigma > 0:
            out = out + sigma * kernels.hashed_normal(scene.noise_seed, boxes, self.d_feat)
        return out

    def crop_feature(self, scene: Scene, box, noise: bool = True) -> np.ndarray:
        return self.features(scene, [box], noise=noise)[0]


def _rotation_like(d: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal map rotating each plane of a random basis by ``angle``."""
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    q = q * np.sign(np.diag(r))
    block = np.eye(d)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, d - 1, 2):
        block[i:i + 2, i:i + 2] = [[c, -s], [s, c]]
    return q @ block @ q.T


def build_world(cfg: WorldConfig) -> World:
    cfg.validate()
    rng = derive_rng(cfg.seed, "world")
    protos = cfg.prototype_scale * rng.normal(size=(cfg.n_classes, cfg.d_app))
    bg_proto = cfg.prototype_scale * rng.normal(size=cfg.d_app)
    amap = _rotation_like(cfg.d_app, cfg.shift_angle, rng)
    bias = cfg.shift_bias * rng.normal(size=cfg.d_app) / np.sqrt(cfg.d_app)
    d_in = cfg.d_app + 4
    projection = rng.normal(size=(cfg.d_feat, d_in)) / np.sqrt(d_in)
    noise = {SOURCE: cfg.noise_sigma_source, TARGET: cfg.noise_sigma_target}
    domains = DomainSpec(
        appearance_map=amap,
        bias=bias,
        noise_sigma=noise,
        class_prior={SOURCE: cfg.class_prior_source, TARGET: cfg.class_prior_target},
        size_range={SOURCE: cfg.size_range_source, TARGET: cfg.size_range_target},
    )
    oracle = FeatureOracle(projection, noise, cfg.iou_power, cfg.location_scale)
    offsets = {SOURCE: float(rng.uniform()), TARGET: float(rng.uniform())}
    return World(cfg, protos, bg_proto, domains, oracle, offsets)


def _place(rng: np.random.Generator, cfg: WorldConfig, size_range, n: int) -> list[Box]:
    boxes: list[Box] = []
    lo, hi = size_range
    for _ in range(n):
        for _attempt in range(cfg.placement_retries):
            w, h = rng.uniform(lo, hi, size=2)
            x1 = rng.uniform(0.0, cfg.width - w)
            y1 = rng.uniform(0.0, cfg.height - h)
            cand = Box(x1, y1, x1 + w, y1 + h)
            if not boxes or pairwise_iou([cand], boxes).max() <= cfg.overlap_cap:
                boxes.append(cand)
                break
        else:
            raise PlacementError(
                f"could not place object {len(boxes) + 1} under overlap_cap={cfg.overlap_cap} "
                f"after {cfg.placement_retries} retries"
            )
    return boxes


_GOLDEN_FRAC = 0.6180339887498949


def _stratified_classes(world: World, domain: str, index: int, n: int) -> np.ndarray:
    """Inverse-CDF class draws from a Weyl sequence over (scene, slot).

    Low discrepancy keeps empirical class frequencies close to the prior
    while each scene remains independently generable.
    """
    cfg = world.cfg
    cdf = np.cumsum(world.domains.class_prior[domain])
    slots = index * cfg.max_objects + np.arange(n)
    u = np.mod(world.class_offset[domain] + _GOLDEN_FRAC * slots, 1.0)
    return np.minimum(np.searchsorted(cdf, u, side="right"), cfg.n_classes - 1)


def generate_scene(world: World, domain: str, index: int) -> Scene:
    cfg = world.cfg
    rng = derive_rng(cfg.seed, "scene", _DOMAIN_KEY[domain], index)
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    boxes = _place(rng, cfg, world.domains.size_range[domain], n)
    classes = _stratified_classes(world, domain, index, n)
    apps = world.prototypes[classes] + cfg.appearance_sigma * rng.normal(size=(n, cfg.d_app))
    bg = world.background_proto + cfg.background_sigma * rng.normal(size=cfg.d_app)
    if domain == TARGET:
        apps = apps @ world.domains.appearance_map.T + world.domains.bias
        bg = world.domains.appearance_map @ bg + world.domains.bias
    objects = [ObjectInstance(int(c), b, a) for c, b, a in zip(classes, boxes, apps)]
    noise_seed = int(rng.integers(0, 2**63 - 1))
    prefix = "s" if domain == SOURCE else "t"
    return Scene(f"{prefix}{index:05d}", domain, cfg.width, cfg.height, objects, bg, noise_seed)


def generate_benchmark(cfg: WorldConfig) -> tuple[list[Scene], list[Scene]]:
    """Build the source and target scene lists for ``cfg`` (seed included)."""
    bench = Benchmark.build(cfg)
    return bench.source, bench.target


class SceneImage:
    """Unlabeled view of a scene: size, id and crop features only.

    Training code gets these for the target domain so it cannot read the
    ground-truth objects.
    """

    __slots__ = ("_scene", "_oracle")

    def __init__(self, scene: Scene, oracle: FeatureOracle):
        self._scene = scene
        self._oracle = oracle

    @property
    def id(self) -> str:
        return self._scene.id

    @property
    def domain(self) -> str:
        return self._scene.domain

    @property
    def size(self) -> tuple[float, float]:
        return self._scene.size

    def features(self, boxes) -> np.ndarray:
        return self._oracle.features(self._scene, boxes)


def images(scenes: Iterable[Scene], oracle: FeatureOracle) -> list[SceneImage]:
    return [SceneImage(s, oracle) for s in scenes]


def write_scenes(path: str | Path, scenes: Sequence[Scene]) -> None:
    with open(path, "w") as fh:
        for s in scenes:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")) + "\n")


def read_scenes(path: str | Path) -> list[Scene]:
    with open(path) as fh:
        return [Scene.from_record(json.loads(line)) for line in fh if line.strip()]


def write_ground_truth(path: str | Path, scenes: Sequence[Scene]) -> None:
    """Labels only (class + box), what evaluation needs for the target domain."""
    with open(path, "w") as fh:
        for s in scenes:
            rec = {"id": s.id, "objects": [{"cls": o.cls, "box": list(o.box)} for o in s.objects]}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_ground_truth(path: str | Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            boxes = np.array([o["box"] for o in rec["objects"]], dtype=np.float64).reshape(-1, 4)
            classes = np.array([o["cls"] for o in rec["objects"]], dtype=np.int64)
            out[rec["id"]] = (boxes, classes)
    return out


def ground_truth(scenes: Sequence[Scene]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    return {s.id: (s.gt_boxes(), s.gt_classes()) for s in scenes}


@dataclass
class Benchmark:
    cfg: WorldConfig
    world: World
    source: list[Scene] = field(default_factory=list)
    target: list[Scene] = field(default_factory=list)

    @classmethod
    def build(cls, cfg: WorldConfig) -> "Benchmark":
        world = build_world(cfg)
        source = [generate_scene(world, SOURCE, i) for i in range(cfg.n_source)]
        target = [generate_scene(world, TARGET, i) for i in range(cfg.n_target)]
        return cls(cfg, world, source, target)
