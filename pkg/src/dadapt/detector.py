"""Toy two-stage detector over oracle crop features.

Stage one scores a fixed anchor grid (objectness + class-agnostic deltas);
stage two re-crops the refined anchors and applies a (K+1)-way class head
and a class-specific box head. Class index ``K`` is background.

Regression heads predict offsets scaled by :data:`BOX_CODER_WEIGHTS`, the
usual Faster R-CNN target normalisation.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import CheckpointError, DivergenceError
from .evaluation import DetectionResult
from .geometry import MAX_LOG_SCALE, Box, decode, encode, pairwise_iou
from .proposals import ProposalSet, crop_features
from .rng import derive_rng

BOX_CODER_WEIGHTS = np.array([10.0, 10.0, 5.0, 5.0])
MIN_BOX_SIZE = 1.0


@dataclass(frozen=True)
class AnchorGrid:
    stride: float = 8.0
    scales: tuple[float, ...] = (12.0, 18.0, 24.0)

    def anchors(self, size: tuple[float, float]) -> np.ndarray:
        """Square anchors centred on a regular grid, clipped to the scene."""
        width, height = size
        xs = np.arange(self.stride / 2, width, self.stride)
        ys = np.arange(self.stride / 2, height, self.stride)
        cx, cy = np.meshgrid(xs, ys)
        cx, cy = cx.reshape(-1), cy.reshape(-1)
        out = []
        for s in self.scales:
            out.append(np.stack([cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2], axis=1))
        boxes = np.concatenate(out)
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, width)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, height)
        return boxes


@dataclass(frozen=True)
class DetectorConfig:
    n_classes: int = 3
    d_feat: int = 16
    hidden: int = 32
    anchor_stride: float = 8.0
    anchor_scales: tuple[float, ...] = (12.0, 18.0, 24.0)
    fg_iou: float = 0.5
    steps: int = 5000
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_anchors: int = 64
    batch_rois: int = 64
    roi_jitter: int = 8
    rpn_nms_iou: float = 0.7
    rpn_post_nms: int = 64


class DetectorModel:
    """Parameters of the four heads; nothing else is stored here."""

    def __init__(self, n_classes: int, d_feat: int, hidden: int, grid: AnchorGrid):
        self.n_classes = n_classes
        self.d_feat = d_feat
        self.hidden = hidden
        self.grid = grid
        self.store = ad.ParamStore()
        k = n_classes
        self.rpn_cls = ad.MLP("rpn_cls", [d_feat, hidden, 1])
        self.rpn_reg = ad.MLP("rpn_reg", [d_feat, hidden, 4])
        self.cls_head = ad.MLP("cls", [d_feat, hidden, k + 1])
        self.reg_head = ad.MLP("reg", [d_feat, hidden, 4 * k])

    @property
    def heads(self) -> tuple[ad.MLP, ...]:
        return (self.rpn_cls, self.rpn_reg, self.cls_head, self.reg_head)

    @classmethod
    def create(cls, cfg: DetectorConfig, rng: np.random.Generator) -> "DetectorModel":
        model = cls(cfg.n_classes, cfg.d_feat, cfg.hidden,
                    AnchorGrid(cfg.anchor_stride, tuple(cfg.anchor_scales)))
        for head in model.heads:
            head.init(model.store, rng)
        return model

    def meta(self) -> dict:
        return {
            "kind": "detector",
            "n_classes": self.n_classes,
            "d_feat": self.d_feat,
            "hidden": self.hidden,
            "anchor_stride": self.grid.stride,
            "anchor_scales": list(self.grid.scales),
        }

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.store.params, self.meta())

    @classmethod
    def load(cls, path) -> "DetectorModel":
        params, meta = ad.load_checkpoint(path)
        if meta.get("kind") != "detector":
            raise CheckpointError(f"{path} is not a detector checkpoint")
        model = cls(meta["n_classes"], meta["d_feat"], meta["hidden"],
                    AnchorGrid(meta["anchor_stride"], tuple(meta["anchor_scales"])))
        expected = [name for head in model.heads for i in range(head.n_layers) for name in head.names(i)]
        if set(params) != set(expected):
            raise CheckpointError(f"{path}: parameter names do not match the detector layout")
        for name in expected:
            model.store.add(name, params[name])
        return model

    def clone(self) -> "DetectorModel":
        return copy.deepcopy(self)


class AnchorCache:
    """Anchor boxes and their crop features per image (model independent)."""

    def __init__(self, grid: AnchorGrid):
        self.grid = grid
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def get(self, image) -> tuple[np.ndarray, np.ndarray]:
        hit = self._cache.get(image.id)
        if hit is None:
            anchors = self.grid.anchors(image.size)
            hit = (anchors, image.features(anchors))
            self._cache[image.id] = hit
        return hit


def _softmax(z: np.ndarray) -> np.ndarray:
    return ad.softmax(z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.clip(ad._sigmoid(z), ad.SIGMOID_EPS, 1.0 - ad.SIGMOID_EPS)


def decode_scaled(boxes, deltas, size) -> np.ndarray:
    """Decode head outputs; boxes that collapse below one unit keep the input box."""
    out = decode(boxes, np.asarray(deltas) / BOX_CODER_WEIGHTS, size, max_log_scale=MAX_LOG_SCALE)
    bad = ((out[:, 2] - out[:, 0]) < MIN_BOX_SIZE) | ((out[:, 3] - out[:, 1]) < MIN_BOX_SIZE)
    out[bad] = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)[bad]
    return out


def encode_scaled(boxes, targets) -> np.ndarray:
    return encode(boxes, targets) * BOX_CODER_WEIGHTS


def class_columns(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Column indices of each row's 4-wide block; background rows point at block 0."""
    lab = np.where(labels < n_classes, labels, 0)
    return lab[:, None] * 4 + np.arange(4)[None, :]


@dataclass
class ImageScores:
    rpn_boxes: np.ndarray
    objectness: np.ndarray
    probs: np.ndarray
    boxes_per_fg: np.ndarray  # refined box for the best foreground class


def score_image(model: DetectorModel, image, cache: AnchorCache, cfg: DetectorConfig) -> ImageScores:
    anchors, feats = cache.get(image)
    st = model.store
    obj = _sigmoid(model.rpn_cls.predict(st, feats)[:, 0])
    rpn = decode_scaled(anchors, model.rpn_reg.predict(st, feats), image.size)
    keep = kernels.nms(rpn, obj, cfg.rpn_nms_iou)[: cfg.rpn_post_nms]
    rpn, obj = rpn[keep], obj[keep]
    roi = image.features(rpn)
    probs = _softmax(model.cls_head.predict(st, roi))
    k = model.n_classes
    best_fg = np.argmax(probs[:, :k], axis=1)
    deltas = model.reg_head.predict(st, roi)
    sel = np.take_along_axis(deltas, class_columns(best_fg, k), axis=1)
    refined = decode_scaled(rpn, sel, image.size)
    return ImageScores(rpn, obj, probs, refined)


def _per_class_nms(boxes, scores, classes, iou_thresh) -> np.ndarray:
    keep = []
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        keep.append(idx[kernels.nms(boxes[idx], scores[idx], iou_thresh)])
    if not keep:
        return np.zeros(0, dtype=np.int64)
    keep = np.concatenate(keep)
    return keep[np.argsort(-scores[keep], kind="stable")]


def propose(model: DetectorModel, images: Sequence, top_n: int = 32, nms_iou: float = 0.5,
            cfg: DetectorConfig | None = None, cache: AnchorCache | None = None) -> ProposalSet:
    """Per image: score anchors, classify refined anchors, per-class NMS, keep ``top_n``.

    ``c_det`` is objectness times the largest class probability (background
    included); ``y_det`` may therefore be the background class.
    """
    cfg = cfg or DetectorConfig(n_classes=model.n_classes, d_feat=model.d_feat)
    cache = cache or AnchorCache(model.grid)
    parts = []
    if top_n <= 0:
        return ProposalSet.empty()
    for image in images:
        s = score_image(model, image, cache, cfg)
        y_det = np.argmax(s.probs, axis=1)
        c_det = s.objectness * s.probs.max(axis=1)
        keep = _per_class_nms(s.boxes_per_fg, c_det, y_det, nms_iou)[:top_n]
        parts.append(ProposalSet([image.id] * len(keep), s.boxes_per_fg[keep], y_det[keep], c_det[keep]))
    return ProposalSet.concat(parts)


def detect(model: DetectorModel, images: Sequence, score_thresh: float = 0.0, nms_iou: float = 0.5,
           max_per_image: int = 100, cfg: DetectorConfig | None = None,
           cache: AnchorCache | None = None) -> list[DetectionResult]:
    """Inference path; depends on the detector parameters only. Sorted by score."""
    cfg = cfg or DetectorConfig(n_classes=model.n_classes, d_feat=model.d_feat)
    cache = cache or AnchorCache(model.grid)
    k = model.n_classes
    results: list[DetectionResult] = []
    for image in images:
        s = score_image(model, image, cache, cfg)
        cls = np.argmax(s.probs[:, :k], axis=1)
        score = s.objectness * s.probs[np.arange(len(cls)), cls]
        ok = np.flatnonzero(score > score_thresh)
        keep = ok[_per_class_nms(s.boxes_per_fg[ok], score[ok], cls[ok], nms_iou)][:max_per_image]
        for i in keep:
            results.append(DetectionResult(image.id, Box(*s.boxes_per_fg[i].tolist()), int(cls[i]),
                                           float(score[i])))
    results.sort(key=lambda r: -r.score)
    return results


def label_source_proposals(props: ProposalSet, gt: Mapping[str, tuple[np.ndarray, np.ndarray]],
                           n_classes: int, fg_iou: float = 0.5) -> ProposalSet:
    """Assign each proposal its max-IoU object; background below ``fg_iou``."""
    out = props.copy()
    out.y_gt[:] = n_classes
    out.max_iou[:] = 0.0
    out.b_gt[:] = np.nan
    for sid, idx in props.groups().items():
        boxes, classes = gt[sid]
        if len(boxes) == 0:
            continue
        ious = pairwise_iou(props.b_det[idx], boxes)
        best = np.argmax(ious, axis=1)
        best_iou = ious[np.arange(len(idx)), best]
        out.max_iou[idx] = best_iou
        fg = best_iou >= fg_iou
        out.y_gt[idx[fg]] = classes[best[fg]]
        out.b_gt[idx[fg]] = boxes[best[fg]]
    return out


# ----------------------------------------------------------------------------
# training


@dataclass
class SourcePool:
    anchor_x: np.ndarray
    anchor_obj: np.ndarray
    anchor_t: np.ndarray
    roi_x: np.ndarray
    roi_y: np.ndarray
    roi_t: np.ndarray


def _jitter(boxes: np.ndarray, n: int, rng: np.random.Generator, size) -> np.ndarray:
    if len(boxes) == 0 or n == 0:
        return np.zeros((0, 4))
    b = np.repeat(boxes, n, axis=0)
    t = np.stack([rng.uniform(-0.3, 0.3, len(b)), rng.uniform(-0.3, 0.3, len(b)),
                  rng.uniform(-0.3, 0.3, len(b)), rng.uniform(-0.3, 0.3, len(b))], axis=1)
    out = decode(b, t, size)
    ok = ((out[:, 2] - out[:, 0]) >= MIN_BOX_SIZE) & ((out[:, 3] - out[:, 1]) >= MIN_BOX_SIZE)
    return out[ok]


def build_source_pool(images, gt, cache: AnchorCache, cfg: DetectorConfig,
                      rng: np.random.Generator) -> SourcePool:
    k = cfg.n_classes
    ax, ao, at, rx, ry, rt = [], [], [], [], [], []
    for image in images:
        boxes, classes = gt[image.id]
        anchors, feats = cache.get(image)
        targets = np.zeros((len(anchors), 4))
        obj = np.zeros(len(anchors))
        if len(boxes):
            ious = pairwise_iou(anchors, boxes)
            best = ious.argmax(axis=1)
            best_iou = ious.max(axis=1)
            obj = (best_iou >= cfg.fg_iou).astype(np.float64)
            pos = obj > 0
            targets[pos] = encode_scaled(anchors[pos], boxes[best[pos]])
        ax.append(feats)
        ao.append(obj)
        at.append(targets)

        rois = np.concatenate([_jitter(boxes, cfg.roi_jitter, rng, image.size), anchors])
        labels = np.full(len(rois), k, dtype=np.int64)
        rtarg = np.zeros((len(rois), 4))
        if len(boxes):
            ious = pairwise_iou(rois, boxes)
            best = ious.argmax(axis=1)
            fg = ious.max(axis=1) >= cfg.fg_iou
            labels[fg] = classes[best[fg]]
            rtarg[fg] = encode_scaled(rois[fg], boxes[best[fg]])
        rx.append(image.features(rois))
        ry.append(labels)
        rt.append(rtarg)
    return SourcePool(np.concatenate(ax), np.concatenate(ao), np.concatenate(at),
                      np.concatenate(rx), np.concatenate(ry), np.concatenate(rt))


def _balanced(rng, pos_idx, neg_idx, batch, pos_fraction):
    n_pos = min(len(pos_idx), int(round(batch * pos_fraction)))
    n_neg = min(len(neg_idx), batch - n_pos)
    parts = []
    if n_pos:
        parts.append(rng.choice(pos_idx, n_pos, replace=False))
    if n_neg:
        parts.append(rng.choice(neg_idx, n_neg, replace=False))
    return np.concatenate(parts)


def rpn_loss_terms(tape: ad.Tape, model: DetectorModel, x, obj, targets) -> dict[str, ad.Node]:
    st = model.store
    p = ad.sigmoid(model.rpn_cls(tape, st, tape.constant(x)))
    terms = {"rpn_cls": ad.binary_cross_entropy(p, obj[:, None])}
    pos = obj > 0
    if pos.any():
        pred = model.rpn_reg(tape, st, tape.constant(x[pos]))
        diff = ad.sub(pred, tape.constant(targets[pos]))
        terms["rpn_reg"] = ad.mean(ad.row_sum(ad.smooth_l1(diff)))
    else:
        terms["rpn_reg"] = tape.constant(0.0)
    return terms


def roi_loss_terms(tape: ad.Tape, model: DetectorModel, x, labels, targets, fg_mask,
                   x_second=None) -> dict[str, ad.Node]:
    """Classification (once per crop given) plus fg-gated regression.

    Regression is the per-row smooth-L1 over the label's 4-wide block times
    the foreground indicator, averaged over all rows.
    """
    st = model.store
    k = model.n_classes
    xn = tape.constant(x)
    terms = {"roi_cls": ad.cross_entropy(model.cls_head(tape, st, xn), labels)}
    if x_second is not None:
        terms["roi_cls_reg_crop"] = ad.cross_entropy(model.cls_head(tape, st, tape.constant(x_second)), labels)
    pred = ad.gather_cols(model.reg_head(tape, st, xn), class_columns(labels, k))
    per_row = ad.row_sum(ad.smooth_l1(ad.sub(pred, tape.constant(targets))))
    gated = ad.mul(per_row, tape.constant(fg_mask.astype(np.float64)))
    terms["roi_reg"] = ad.scale(ad.total(gated), 1.0 / len(labels))
    return terms


def _check_finite(stage, step, value):
    if not np.isfinite(value):
        raise DivergenceError(stage, step, value)


def pretrain_source(images: Sequence, gt, cfg: DetectorConfig, seed: int,
                    cache: AnchorCache | None = None) -> tuple[DetectorModel, list[float]]:
    """Train all four heads on labelled source scenes; returns model and loss curve."""
    if len(images) == 0:
        raise ValueError("pretrain_source needs at least one source scene")
    rng = derive_rng(seed, "detector", "pretrain")
    model = DetectorModel.create(cfg, rng)
    cache = cache or AnchorCache(model.grid)
    pool = build_source_pool(images, gt, cache, cfg, rng)
    a_pos = np.flatnonzero(pool.anchor_obj > 0)
    a_neg = np.flatnonzero(pool.anchor_obj == 0)
    r_fg = np.flatnonzero(pool.roi_y < cfg.n_classes)
    r_bg = np.flatnonzero(pool.roi_y == cfg.n_classes)
    store = model.store
    store.momentum, store.weight_decay = cfg.momentum, cfg.weight_decay
    curve = []
    for step in range(cfg.steps):
        ai = _balanced(rng, a_pos, a_neg, cfg.batch_anchors, 0.5)
        ri = _balanced(rng, r_fg, r_bg, cfg.batch_rois, 0.25)
        tape = ad.Tape()
        terms = rpn_loss_terms(tape, model, pool.anchor_x[ai], pool.anchor_obj[ai], pool.anchor_t[ai])
        labels = pool.roi_y[ri]
        terms.update(roi_loss_terms(tape, model, pool.roi_x[ri], labels, pool.roi_t[ri],
                                    labels < cfg.n_classes))
        loss = ad.add(ad.add(terms["rpn_cls"], terms["rpn_reg"]), ad.add(terms["roi_cls"], terms["roi_reg"]))
        _check_finite("pretrain", step, loss.item())
        tape.backward(loss)
        ad.sgd_step(store, cfg.lr)
        curve.append(loss.item())
    return model, curve


@dataclass(frozen=True)
class TargetTrainConfig:
    steps: int = 1000
    lr: float = 0.01
    lr_final_ratio: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 64
    use_regression: bool = True


def target_batch_arrays(props: ProposalSet, images_by_id: Mapping, n_classes: int,
                        use_regression: bool = True):
    """Features at ``b_det`` and at ``b_reg`` (``b_det`` where absent), labels, fg mask, targets."""
    y = props.y_cls
    if np.any(y < 0):
        raise ValueError("every target proposal needs a category pseudo label y_cls")
    fg = y < n_classes
    has_reg = props.has_b_reg()
    if use_regression and np.any(fg & ~has_reg):
        raise ValueError("foreground proposals need a box pseudo label b_reg")
    second = np.where(has_reg[:, None], props.b_reg, props.b_det)
    x_det = crop_features(props, images_by_id)
    x_reg = crop_features(props, images_by_id, second)
    targets = np.zeros((len(props), 4))
    mask = fg & has_reg if use_regression else np.zeros(len(props), dtype=bool)
    if mask.any():
        targets[mask] = encode_scaled(props.b_det[mask], props.b_reg[mask])
    return x_det, x_reg, y, mask, targets


def train_target(model: DetectorModel, props: ProposalSet, images_by_id: Mapping,
                 cfg: TargetTrainConfig, seed: int, objectness: tuple[np.ndarray, np.ndarray] | None = None,
                 ) -> tuple[DetectorModel, list[float]]:
    """Fine-tune a copy of ``model`` on target pseudo labels, only at proposal locations.

    Loss per batch: classification of the ``b_det`` crop, classification of
    the ``b_reg`` crop, and smooth-L1 regression from ``b_det`` toward
    ``b_reg`` on foreground rows. ``objectness`` optionally adds an anchor
    objectness term (used only by the confidence-filtered self-training
    baseline).
    """
    model = model.clone()
    if len(props) == 0:
        return model, []
    x_det, x_reg, y, mask, targets = target_batch_arrays(props, images_by_id, model.n_classes,
                                                         cfg.use_regression)
    rng = derive_rng(seed, "detector", "target")
    store = model.store
    trained = [n for head in (model.cls_head, model.reg_head) for i in range(head.n_layers)
               for n in head.names(i)]
    if objectness is not None:
        trained += [n for i in range(model.rpn_cls.n_layers) for n in model.rpn_cls.names(i)]
    store.reset_momentum()
    store.momentum, store.weight_decay = cfg.momentum, cfg.weight_decay
    curve = []
    n = len(y)
    for step in range(cfg.steps):
        idx = rng.integers(0, n, size=min(cfg.batch, n))
        tape = ad.Tape()
        terms = roi_loss_terms(tape, model, x_det[idx], y[idx], targets[idx], mask[idx], x_second=x_reg[idx])
        loss = ad.add(ad.add(terms["roi_cls"], terms["roi_cls_reg_crop"]), terms["roi_reg"])
        if objectness is not None:
            ox, oy = objectness
            oi = rng.integers(0, len(oy), size=min(cfg.batch, len(oy)))
            p = ad.sigmoid(model.rpn_cls(tape, store, tape.constant(ox[oi])))
            loss = ad.add(loss, ad.binary_cross_entropy(p, oy[oi][:, None]))
        _check_finite("train_target", step, loss.item())
        tape.backward(loss)
        lr = cfg.lr * cfg.lr_final_ratio ** (step / max(1, cfg.steps - 1))
        ad.sgd_step(store, lr, only=trained)
        curve.append(loss.item())
    return model, curve
