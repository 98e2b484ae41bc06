"""The self-feedback loop: pretrain, then alternate adaptors and detector fine-tuning.

Round ``r`` (1-based):

1. propose on both domains with the current detector; label source proposals
2. train the category adaptor, pseudo-label target categories
3. keep foreground proposals, train the box adaptor, pseudo-label target boxes
4. fine-tune the detector on the target pseudo labels

Every random stream is derived from ``(seed, round, stage)``, so a run with
``rounds=1`` reproduces the first round of a longer run and resuming from a
saved round gives the same result as never stopping.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import box_adaptor as boxa
from . import cat_adaptor as cata
from . import detector as det
from . import evaluation as ev
from .errors import CheckpointError, ConfigError, StageError
from .geometry import pairwise_iou
from .proposals import ProposalSet, read_proposals, write_proposals
from .rng import derive_seed

log = logging.getLogger(__name__)

ABLATIONS = ("no_weight", "no_condition", "no_bg_source", "no_bg_target", "no_dd", "no_cat_adaptor",
             "no_box_adaptor", "coupled_inputs", "standard_pseudo_label")


@dataclass(frozen=True)
class PipelineConfig:
    rounds: int = 3
    lambda_coeff: float = 1.0
    eta_coeff: float = 0.03
    weight_threshold: float = 0.5
    enlarge_factor: float = 2.0
    top_n: int = 32
    nms_iou: float = 0.5
    pretrain_steps: int = 5000
    adaptor_steps: int = 2000
    finetune_steps: int = 1000
    budget_decay: float = 1.0
    pretrain_lr: float = 0.02
    adaptor_lr: float = 0.01
    finetune_lr: float = 0.01
    finetune_lr_final_ratio: float = 0.1
    adaptor_batch: int = 32
    finetune_batch: int = 64
    hidden: int = 32
    disparity: str = "smooth_l1"
    no_weight: bool = False
    no_condition: bool = False
    no_bg_source: bool = False
    no_bg_target: bool = False
    no_dd: bool = False
    no_cat_adaptor: bool = False
    no_box_adaptor: bool = False
    coupled_inputs: bool = False
    standard_pseudo_label: bool = False
    standard_threshold: float = 0.5
    source_replay: float = 0.0  # experimental, off by default
    seed: int = 0

    def validate(self) -> None:
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        for name in ("lambda_coeff", "eta_coeff", "weight_threshold", "source_replay", "standard_threshold"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("top_n", "pretrain_steps", "adaptor_steps", "finetune_steps", "adaptor_batch",
                     "finetune_batch", "hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.enlarge_factor <= 0:
            raise ConfigError("enlarge_factor must be positive")
        if not 0 < self.budget_decay <= 1:
            raise ConfigError("budget_decay must lie in (0, 1]")
        if not 0 <= self.nms_iou <= 1:
            raise ConfigError("nms_iou must lie in [0, 1]")
        if self.disparity not in boxa.DISPARITIES:
            raise ConfigError(f"disparity must be one of {boxa.DISPARITIES}")
        for name in ("pretrain_lr", "adaptor_lr", "finetune_lr", "finetune_lr_final_ratio"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping) -> "PipelineConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for name, value in data.items():
            default = known[name].default
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"{name} must be true or false")
            elif isinstance(default, (int, float)) and (isinstance(value, bool)
                                                        or not isinstance(value, (int, float))):
                raise ConfigError(f"{name} must be a number")
            elif isinstance(default, int) and not isinstance(default, bool) and value != int(value):
                raise ConfigError(f"{name} must be an integer")
            elif isinstance(default, str) and not isinstance(value, str):
                raise ConfigError(f"{name} must be a string")
            values[name] = int(value) if type(default) is int else value
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a flat object")
        return cls.from_dict(data)

    def with_ablations(self, names: Sequence[str]) -> "PipelineConfig":
        bad = [n for n in names if n not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablation(s) {bad}; choose from {', '.join(ABLATIONS)}")
        return dataclasses.replace(self, **{n: True for n in names})

    def budget(self, base: int, round_index: int) -> int:
        return max(1, int(round(base * self.budget_decay ** (round_index - 1))))

    def detector_config(self, n_classes: int, d_feat: int) -> det.DetectorConfig:
        return det.DetectorConfig(n_classes=n_classes, d_feat=d_feat, hidden=self.hidden,
                                  steps=self.pretrain_steps, lr=self.pretrain_lr)

    def cat_config(self, round_index: int) -> cata.CatAdaptorConfig:
        return cata.CatAdaptorConfig(
            hidden=self.hidden, steps=self.budget(self.adaptor_steps, round_index), lr=self.adaptor_lr,
            batch_per_domain=self.adaptor_batch, lambda_coeff=self.lambda_coeff,
            weight_threshold=self.weight_threshold, use_weight=not self.no_weight,
            condition=not self.no_condition, bg_source=not self.no_bg_source,
            bg_target=not self.no_bg_target, foreground_only=self.coupled_inputs)

    def box_config(self, round_index: int) -> boxa.BoxAdaptorConfig:
        return boxa.BoxAdaptorConfig(
            hidden=self.hidden, steps=self.budget(self.adaptor_steps, round_index), lr=self.adaptor_lr,
            batch_per_domain=self.adaptor_batch, eta_coeff=0.0 if self.no_dd else self.eta_coeff,
            enlarge_factor=self.enlarge_factor, disparity=self.disparity)

    def target_config(self, round_index: int, use_regression: bool) -> det.TargetTrainConfig:
        return det.TargetTrainConfig(steps=self.budget(self.finetune_steps, round_index), lr=self.finetune_lr,
                                     lr_final_ratio=self.finetune_lr_final_ratio, batch=self.finetune_batch,
                                     use_regression=use_regression)


class TargetEvaluator:
    """Holds target ground truth; the training loop only ever sees its summaries."""

    def __init__(self, target_images: Sequence, target_gt: Mapping, n_classes: int,
                 error_score_thresh: float = 0.5):
        self.images = list(target_images)
        self.gt = target_gt
        self.n_classes = n_classes
        self.error_score_thresh = error_score_thresh

    def detection(self, model: det.DetectorModel, cache: det.AnchorCache | None = None) -> dict:
        results = det.detect(model, self.images, cache=cache)
        m, per_class = ev.mean_average_precision(results, self.gt, self.n_classes)
        errors = ev.error_analysis(results, self.gt, score_thresh=self.error_score_thresh)
        return {"map": m, "per_class_ap": per_class, "error_breakdown": errors.as_dict()}

    def proposals(self, props: ProposalSet) -> dict:
        """Pseudo-label quality: mIoU_cls over all proposals, mIoU_reg over true-foreground boxes."""
        truth = det.label_source_proposals(props, self.gt, self.n_classes)
        k1 = self.n_classes + 1
        out: dict = {}
        labelled = props.y_cls >= 0
        if labelled.any():
            c = ev.ConfusionCounts.from_labels(truth.y_gt[labelled], props.y_cls[labelled], k1)
            out["miou_cls"] = ev.miou_cls(c)
        out["miou_cls_detector"] = ev.miou_cls(ev.ConfusionCounts.from_labels(truth.y_gt, props.y_det, k1))
        pairs = props.has_b_reg() & (props.y_cls < self.n_classes) & (truth.y_gt < self.n_classes)
        if pairs.any():
            out["miou_reg"] = ev.miou_reg(props.b_reg[pairs], truth.b_gt[pairs])
            out["miou_reg_detector"] = ev.miou_reg(props.b_det[pairs], truth.b_gt[pairs])
        return out


@dataclass
class RoundArtifacts:
    index: int
    detector: det.DetectorModel
    cat: cata.CatAdaptor | None = None
    box: boxa.BoxAdaptor | None = None
    props_src: ProposalSet | None = None
    props_tgt: ProposalSet | None = None
    metrics: dict = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)  # wall seconds per stage, not persisted

    def fg_sets(self, n_classes: int) -> tuple[ProposalSet, ProposalSet]:
        s, t, _ = boxa.select_foreground(self.props_src, self.props_tgt, n_classes)
        return s, t


def _by_id(images) -> dict:
    return {im.id: im for im in images}


def pseudo_boxes_standard(props: ProposalSet, n_classes: int, threshold: float):
    """Confident foreground proposals turned into per-scene pseudo ground truth."""
    keep = (props.y_cls < n_classes) & (props.c_det >= threshold)
    boxes = np.where(props.has_b_reg()[:, None], props.b_reg, props.b_det)
    out: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for sid, idx in props.groups().items():
        sel = idx[keep[idx]]
        out[sid] = (boxes[sel], props.y_cls[sel])
    return out


def relabel_standard(props: ProposalSet, pseudo_gt, n_classes: int) -> ProposalSet:
    """Label every proposal from its best-overlapping pseudo box; background below IoU 0.5."""
    lab = det.label_source_proposals(props, pseudo_gt, n_classes)
    out = props.copy()
    out.y_cls = lab.y_gt.copy()
    out.b_reg = lab.b_gt.copy()
    return out


def standard_objectness(images, pseudo_gt, cache: det.AnchorCache, fg_iou: float = 0.5):
    xs, ys = [], []
    for im in images:
        anchors, feats = cache.get(im)
        boxes, _ = pseudo_gt.get(im.id, (np.zeros((0, 4)), None))
        y = np.zeros(len(anchors))
        if len(boxes):
            y = (pairwise_iou(anchors, boxes).max(axis=1) >= fg_iou).astype(np.float64)
        xs.append(feats)
        ys.append(y)
    return np.concatenate(xs), np.concatenate(ys)


def _source_replay(src: ProposalSet, n: int, seed: int) -> ProposalSet:
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(src), size=min(n, len(src)), replace=False))
    out = src.subset(idx)
    out.y_cls = out.y_gt.copy()
    out.b_reg = out.b_gt.copy()
    return out


def run_round(cfg: PipelineConfig, r: int, model: det.DetectorModel, source_images, source_gt,
              target_images, n_classes: int, cache: det.AnchorCache,
              evaluator: TargetEvaluator | None = None, prev_cat: cata.CatAdaptor | None = None,
              prev_box: boxa.BoxAdaptor | None = None) -> RoundArtifacts:
    """One pass of the loop; ``prev_cat``/``prev_box`` are the adaptors to continue from."""
    images_by_id = _by_id(source_images) | _by_id(target_images)
    k = n_classes
    extra: dict = {"round": r}
    timings: dict[str, float] = {}
    stage, t0 = "propose", time.perf_counter()

    def enter(name: str) -> str:
        nonlocal t0
        now = time.perf_counter()
        timings[stage] = now - t0
        t0 = now
        return name

    try:
        props_s = det.propose(model, source_images, cfg.top_n, cfg.nms_iou, cache=cache)
        props_s = det.label_source_proposals(props_s, source_gt, k)
        props_t = det.propose(model, target_images, cfg.top_n, cfg.nms_iou, cache=cache)

        stage = enter("category_adaptor")
        cat = None
        if cfg.no_cat_adaptor:
            props_t = props_t.copy()
            props_t.y_cls = props_t.y_det.copy()
        else:
            cat, cat_log = cata.train_category_adaptor(props_s, props_t, images_by_id, k, cfg.cat_config(r),
                                                      derive_seed(cfg.seed, r, "cat"), init=prev_cat)
            props_t = cata.pseudo_label_categories(cat, props_t, images_by_id)
            extra["cat_skipped_adv_steps"] = cat_log.skipped_adv

        stage = enter("box_adaptor")
        box = None
        fg_s, fg_t, skip = boxa.select_foreground(props_s, props_t, k)
        extra["n_fg_src"], extra["n_fg_tgt"] = len(fg_s), len(fg_t)
        use_reg = not cfg.no_box_adaptor and not skip
        if skip and not cfg.no_box_adaptor:
            log.warning("round %d: empty foreground set, box adaptation skipped", r)
        extra["box_skipped"] = bool(skip or cfg.no_box_adaptor)
        if use_reg:
            box, _ = boxa.train_box_adaptor(fg_s, fg_t, images_by_id, k, cfg.box_config(r),
                                            derive_seed(cfg.seed, r, "box"), init=prev_box)
            fg_idx = np.flatnonzero(props_t.y_cls < k)
            labelled, fallback = boxa.pseudo_label_boxes(box, fg_t, images_by_id, cfg.enlarge_factor)
            props_t.b_reg[fg_idx] = labelled.b_reg
            extra["box_fallbacks"] = int(fallback.sum())

        stage = enter("train_target")
        objectness = None
        train_props = props_t
        if cfg.standard_pseudo_label:
            pseudo = pseudo_boxes_standard(props_t, k, cfg.standard_threshold)
            train_props = relabel_standard(props_t, pseudo, k)
            objectness = standard_objectness(target_images, pseudo, cache)
        if cfg.source_replay > 0:
            n = int(round(cfg.source_replay * len(train_props)))
            train_props = ProposalSet.concat([train_props, _source_replay(props_s, n, derive_seed(cfg.seed, r, "replay"))])
        new_model, _ = det.train_target(model, train_props, images_by_id, cfg.target_config(r, use_reg),
                                        derive_seed(cfg.seed, r, "target"), objectness=objectness)
        enter("done")
    except (ValueError, FloatingPointError) as exc:
        raise StageError(r, stage, exc) from exc

    metrics: dict = {"extra": extra}
    if evaluator is not None:
        metrics.update(evaluator.detection(new_model, cache))
        metrics.update(evaluator.proposals(train_props if cfg.standard_pseudo_label else props_t))
    return RoundArtifacts(r, new_model, cat, box, props_s, train_props if cfg.standard_pseudo_label else props_t,
                          metrics, timings)


def pretrain(cfg: PipelineConfig, source_images, source_gt, n_classes: int, d_feat: int,
             cache: det.AnchorCache | None = None) -> tuple[det.DetectorModel, list[float]]:
    try:
        return det.pretrain_source(source_images, source_gt, cfg.detector_config(n_classes, d_feat),
                                   derive_seed(cfg.seed, 0, "pretrain"), cache=cache)
    except (ValueError, FloatingPointError) as exc:
        raise StageError(0, "pretrain", exc) from exc


def source_histogram(model, source_images, source_gt, cfg: PipelineConfig, n_classes: int,
                     cache, thresholds=(0.0,)):
    props = det.propose(model, source_images, cfg.top_n, cfg.nms_iou, cache=cache)
    props = det.label_source_proposals(props, source_gt, n_classes)
    return props, [ev.iou_histogram(props.max_iou, props.c_det, 10, t) for t in thresholds]


def run_dadapt(cfg: PipelineConfig, source_images, source_gt, target_images, n_classes: int,
               evaluator: TargetEvaluator | None = None, run_dir: str | Path | None = None,
               resume: bool = False, pretrained: det.DetectorModel | None = None,
               ) -> tuple[det.DetectorModel, list[RoundArtifacts]]:
    """Pretrain (or reuse ``pretrained``), then ``cfg.rounds`` rounds.

    With ``run_dir`` every round is saved as it completes; ``resume`` reloads
    completed rounds and continues after the last one. The returned list
    starts with round 0 (the pretrained detector).
    """
    cfg.validate()
    if len(source_images) == 0 or len(target_images) == 0:
        raise ValueError("both domains need at least one scene")
    run_dir = Path(run_dir) if run_dir is not None else None
    d_feat = source_images[0].features(np.array([[0.0, 0.0, 1.0, 1.0]])).shape[1]
    cache = det.AnchorCache(det.AnchorGrid())
    artifacts: list[RoundArtifacts] = []

    done = completed_rounds(run_dir) if (run_dir is not None and resume) else []
    if 0 in done:
        artifacts.append(load_round(run_dir, 0))
    else:
        t0 = time.perf_counter()
        model = pretrained.clone() if pretrained is not None else \
            pretrain(cfg, source_images, source_gt, n_classes, d_feat, cache)[0]
        art0 = RoundArtifacts(0, model, timings={"pretrain": time.perf_counter() - t0})
        props_s, (hist,) = source_histogram(model, source_images, source_gt, cfg, n_classes, cache)
        art0.props_src = props_s
        art0.metrics = {"extra": {"round": 0}}
        if evaluator is not None:
            art0.metrics.update(evaluator.detection(model, cache))
        art0.metrics["histogram"] = hist
        artifacts.append(art0)
        if run_dir is not None:
            save_round(run_dir, art0)
    model = artifacts[0].detector
    cat = box = None
    for r in range(1, cfg.rounds + 1):
        if r in done and all(i in done for i in range(r + 1)):
            art = load_round(run_dir, r)
        else:
            art = run_round(cfg, r, model, source_images, source_gt, target_images, n_classes, cache, evaluator,
                            prev_cat=cat, prev_box=box)
            if run_dir is not None:
                save_round(run_dir, art)
        artifacts.append(art)
        model = art.detector
        cat = art.cat or cat
        box = art.box or box
    return model, artifacts


# ----------------------------------------------------------------------------
# persistence

ROUND_FILES = ("detector.ckpt", "metrics.json")


def round_dir(run_dir: Path, index: int) -> Path:
    return Path(run_dir) / f"round_{index}"


def metrics_report(metrics: dict, histogram_path: str | None) -> ev.MetricsReport:
    return ev.MetricsReport(
        per_class_ap=list(metrics.get("per_class_ap", [])),
        map=metrics.get("map", math.nan),
        miou_cls=metrics.get("miou_cls"),
        miou_reg=metrics.get("miou_reg"),
        error_breakdown=metrics.get("error_breakdown", {}),
        histogram_path=histogram_path,
        extra={k: v for k, v in metrics.items() if k not in
               ("per_class_ap", "map", "miou_cls", "miou_reg", "error_breakdown", "histogram")}
        | metrics.get("extra", {}),
    )


def save_round(run_dir, art: RoundArtifacts) -> Path:
    d = round_dir(run_dir, art.index)
    d.mkdir(parents=True, exist_ok=True)
    art.detector.save(d / "detector.ckpt")
    if art.cat is not None:
        art.cat.save(d / "cat.ckpt")
    if art.box is not None:
        art.box.save(d / "box.ckpt")
    if art.props_src is not None:
        write_proposals(d / "props_src.jsonl", art.props_src)
    if art.props_tgt is not None:
        write_proposals(d / "props_tgt.jsonl", art.props_tgt)
    hist_path = None
    hist = art.metrics.get("histogram")
    if hist is not None:
        (d / "iou_hist.csv").write_text(hist.to_csv())
        (d / "iou_hist.svg").write_text(hist.to_svg(f"round {art.index} source proposals"))
        hist_path = "iou_hist.csv"
    # metrics last: its presence marks the round as complete
    metrics_report(art.metrics, hist_path).write(d / "metrics.json")
    return d


def load_round(run_dir, index: int) -> RoundArtifacts:
    d = round_dir(run_dir, index)
    for name in ROUND_FILES:
        if not (d / name).exists():
            raise CheckpointError(f"{d}: missing {name}")
    opt = lambda name, fn: fn(d / name) if (d / name).exists() else None  # noqa: E731
    metrics = json.loads((d / "metrics.json").read_text())
    return RoundArtifacts(
        index=index,
        detector=det.DetectorModel.load(d / "detector.ckpt"),
        cat=opt("cat.ckpt", cata.CatAdaptor.load),
        box=opt("box.ckpt", boxa.BoxAdaptor.load),
        props_src=opt("props_src.jsonl", read_proposals),
        props_tgt=opt("props_tgt.jsonl", read_proposals),
        metrics=metrics,
    )


def completed_rounds(run_dir) -> list[int]:
    if run_dir is None or not Path(run_dir).exists():
        return []
    out = []
    for p in Path(run_dir).glob("round_*"):
        try:
            i = int(p.name.split("_", 1)[1])
        except ValueError:
            continue
        if all((p / f).exists() for f in ROUND_FILES):
            out.append(i)
    return sorted(out)
