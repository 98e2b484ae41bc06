"""Box adaptor: a class-specific regressor aligned with a disparity game.

``F_reg`` embeds the crop around an enlarged proposal, ``G_reg`` predicts
offsets toward the object and ``G_adv`` is an adversarial copy of ``G_reg``.
``G_adv`` agrees with ``G_reg`` on source proposals and pulls away from it on
target proposals; ``F_reg`` is trained against that, through a reversal node.
Offsets live in the detector's scaled coding (see
:data:`dadapt.detector.BOX_CODER_WEIGHTS`).
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .detector import BOX_CODER_WEIGHTS, MIN_BOX_SIZE, class_columns, encode_scaled
from .errors import CheckpointError, DivergenceError
from .geometry import MAX_LOG_SCALE, decode, enlarge
from .proposals import ProposalSet, crop_features
from .rng import derive_rng

DISPARITIES = ("smooth_l1", "iou")


@dataclass(frozen=True)
class BoxAdaptorConfig:
    hidden: int = 32
    steps: int = 2000
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.01
    batch_per_domain: int = 32
    eta_coeff: float = 0.03
    enlarge_factor: float = 2.0
    disparity: str = "smooth_l1"
    eta_warmup: bool = True


class BoxAdaptor:
    def __init__(self, n_classes: int, d_feat: int, hidden: int = 32):
        self.n_classes = n_classes
        self.d_feat = d_feat
        self.hidden = hidden
        self.store = ad.ParamStore()
        self.f_reg = ad.MLP("box.F", [d_feat, hidden, hidden])
        self.g_reg = ad.MLP("box.G", [hidden, hidden, 4 * n_classes])
        self.g_adv = ad.MLP("box.G_adv", [hidden, hidden, 4 * n_classes])

    @property
    def heads(self):
        return (self.f_reg, self.g_reg, self.g_adv)

    @classmethod
    def create(cls, n_classes: int, d_feat: int, cfg: BoxAdaptorConfig,
               rng: np.random.Generator) -> "BoxAdaptor":
        a = cls(n_classes, d_feat, cfg.hidden)
        for head in a.heads:
            head.init(a.store, rng)
        a.reset_adversary()
        return a

    def reset_adversary(self) -> None:
        """Start ``G_adv`` from ``G_reg``'s weights so the disparity starts at zero."""
        self.g_reg.copy_into(self.store, self.g_adv)

    def offsets(self, x: np.ndarray) -> np.ndarray:
        f = np.maximum(self.f_reg.predict(self.store, x), 0.0)
        return self.g_reg.predict(self.store, f)

    def meta(self) -> dict:
        return {"kind": "box_adaptor", "n_classes": self.n_classes, "d_feat": self.d_feat,
                "hidden": self.hidden}

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.store.params, self.meta())

    @classmethod
    def load(cls, path) -> "BoxAdaptor":
        params, meta = ad.load_checkpoint(path)
        if meta.get("kind") != "box_adaptor":
            raise CheckpointError(f"{path} is not a box adaptor checkpoint")
        a = cls(meta["n_classes"], meta["d_feat"], meta["hidden"])
        for name, value in params.items():
            a.store.add(name, value)
        return a


def offset_iou(a: ad.Node, b: ad.Node) -> ad.Node:
    """Row-wise IoU of the boxes two scaled offset vectors produce from a shared unit anchor."""
    ta, tb = a.data / BOX_CODER_WEIGHTS, b.data / BOX_CODER_WEIGHTS

    def corners(t):
        w, h = np.exp(t[:, 2]), np.exp(t[:, 3])
        return t[:, 0] - w / 2, t[:, 1] - h / 2, t[:, 0] + w / 2, t[:, 1] + h / 2, w, h

    ax1, ay1, ax2, ay2, aw, ah = corners(ta)
    bx1, by1, bx2, by2, bw, bh = corners(tb)
    a_x1 = ax1 >= bx1
    a_y1 = ay1 >= by1
    a_x2 = ax2 <= bx2
    a_y2 = ay2 <= by2
    iw_raw = np.where(a_x2, ax2, bx2) - np.where(a_x1, ax1, bx1)
    ih_raw = np.where(a_y2, ay2, by2) - np.where(a_y1, ay1, by1)
    ow, oh = iw_raw > 0, ih_raw > 0
    iw, ih = np.where(ow, iw_raw, 0.0), np.where(oh, ih_raw, 0.0)
    inter = iw * ih
    area_a, area_b = aw * ah, bw * bh
    union = area_a + area_b - inter
    value = inter / union

    def backward(g):
        d_inter = g * (union + inter) / union ** 2
        d_area = -g * inter / union ** 2
        d_iw = d_inter * ih * ow
        d_ih = d_inter * iw * oh

        def grads(mine_x1, mine_y1, mine_x2, mine_y2, w, h, area):
            # d iw / d x2 = 1 for the box supplying min(x2), d iw / d x1 = -1 for max(x1)
            g_x1 = -d_iw * mine_x1
            g_x2 = d_iw * mine_x2
            g_y1 = -d_ih * mine_y1
            g_y2 = d_ih * mine_y2
            gt = np.stack([
                g_x1 + g_x2,
                g_y1 + g_y2,
                (g_x2 - g_x1) * w / 2 + d_area * area,
                (g_y2 - g_y1) * h / 2 + d_area * area,
            ], axis=1)
            return gt / BOX_CODER_WEIGHTS

        ga = grads(a_x1, a_y1, a_x2, a_y2, aw, ah, area_a)
        gb = grads(~a_x1, ~a_y1, ~a_x2, ~a_y2, bw, bh, area_b)
        return ga, gb

    return a.tape.record(value, "offset_iou", (a, b), backward=backward)


def disparity(adv: ad.Node, main: ad.Node, kind: str = "smooth_l1") -> ad.Node:
    """Mean per-row disagreement between two offset predictions."""
    if kind == "smooth_l1":
        return ad.mean(ad.row_sum(ad.smooth_l1(ad.sub(adv, main))))
    if kind == "iou":
        return 1.0 - ad.mean(offset_iou(adv, main))
    raise ValueError(f"unknown disparity {kind!r}; expected one of {DISPARITIES}")


def forward_loss(tape: ad.Tape, a: BoxAdaptor, xs, ys, ts, xt, yt, eta: float,
                 kind: str = "smooth_l1") -> dict[str, ad.Node]:
    """``total = L_src - eta * (disp_t - disp_s)`` with a unit reversal before ``G_adv``.

    ``G_adv`` ascends ``eta * (disp_t - disp_s)`` while ``F_reg`` descends
    ``L_src + eta * (disp_t - disp_s)``: one objective, two players, both
    moving at the rate ``eta`` sets. ``G_reg``'s output enters the disparity
    detached, so ``G_reg`` is trained by ``L_src`` alone.
    """
    st = a.store
    k = a.n_classes
    n_s = len(xs)
    f = ad.relu(a.f_reg(tape, st, tape.constant(np.concatenate([xs, xt]))))
    r = a.g_reg(tape, st, f)
    src_rows, tgt_rows = np.arange(n_s), np.arange(n_s, n_s + len(xt))
    cols_s, cols_t = class_columns(ys, k), class_columns(yt, k)
    r_s = ad.gather_cols(ad.take_rows(r, src_rows), cols_s)
    l_src = ad.mean(ad.row_sum(ad.smooth_l1(ad.sub(r_s, tape.constant(ts)))))
    adv = a.g_adv(tape, st, ad.grad_reverse(f, 1.0))
    r_det = ad.detach(r)
    disp_s = disparity(ad.gather_cols(ad.take_rows(adv, src_rows), cols_s),
                       ad.gather_cols(ad.take_rows(r_det, src_rows), cols_s), kind)
    disp_t = disparity(ad.gather_cols(ad.take_rows(adv, tgt_rows), cols_t),
                       ad.gather_cols(ad.take_rows(r_det, tgt_rows), cols_t), kind)
    l_adv = ad.sub(disp_t, disp_s)
    total = l_src if eta == 0 else ad.sub(l_src, ad.scale(l_adv, eta))
    return {"src": l_src, "disp_s": disp_s, "disp_t": disp_t, "adv": l_adv, "total": total}


@dataclass
class BoxTrainLog:
    src: list[float] = field(default_factory=list)
    disp_s: list[float] = field(default_factory=list)
    disp_t: list[float] = field(default_factory=list)


def select_foreground(src: ProposalSet, tgt: ProposalSet, n_classes: int,
                      ) -> tuple[ProposalSet, ProposalSet, bool]:
    """Foreground by ``y_gt`` on source and by ``y_cls`` on target; the flag is True when either is empty."""
    if len(tgt) and np.any(tgt.y_cls < 0):
        raise ValueError("target proposals need y_cls before box adaptation")
    s = src.subset((src.y_gt >= 0) & (src.y_gt < n_classes))
    t = tgt.subset(tgt.y_cls < n_classes)
    return s, t, (len(s) == 0 or len(t) == 0)


def enlarged_features(props: ProposalSet, images_by_id: Mapping, factor: float) -> np.ndarray:
    boxes = np.empty_like(props.b_det)
    for sid, idx in props.groups().items():
        boxes[idx] = enlarge(props.b_det[idx], factor, images_by_id[sid].size)
    return crop_features(props, images_by_id, boxes)


def warmup(progress: float) -> float:
    """Ramp from 0 to ~1 over training, ``2 / (1 + exp(-10 p)) - 1``."""
    return 2.0 / (1.0 + np.exp(-10.0 * progress)) - 1.0


def train_box_adaptor(src_fg: ProposalSet, tgt_fg: ProposalSet, images_by_id: Mapping, n_classes: int,
                      cfg: BoxAdaptorConfig, seed: int, init: BoxAdaptor | None = None,
                      ) -> tuple[BoxAdaptor, BoxTrainLog]:
    """Train ``F_reg``/``G_reg`` on source offsets against ``G_adv``.

    ``init`` continues from a copy of an earlier adaptor; ``G_adv`` is reset
    to ``G_reg`` either way, so both disparities start at exactly zero.
    """
    if len(src_fg) == 0 or len(tgt_fg) == 0:
        raise ValueError("box adaptor needs foreground proposals in both domains")
    if cfg.disparity not in DISPARITIES:
        raise ValueError(f"unknown disparity {cfg.disparity!r}")
    rng = derive_rng(seed, "box_adaptor")
    xs = enlarged_features(src_fg, images_by_id, cfg.enlarge_factor)
    xt = enlarged_features(tgt_fg, images_by_id, cfg.enlarge_factor)
    ys, yt = src_fg.y_gt, tgt_fg.y_cls
    ts = encode_scaled(src_fg.b_det, src_fg.b_gt)
    if init is None:
        a = BoxAdaptor.create(n_classes, xs.shape[1], cfg, rng)
    else:
        if init.meta() != BoxAdaptor(n_classes, xs.shape[1], cfg.hidden).meta():
            raise ValueError("init adaptor does not match the requested architecture")
        a = copy.deepcopy(init)
        a.reset_adversary()
        a.store.reset_momentum()
    a.store.momentum, a.store.weight_decay = cfg.momentum, cfg.weight_decay
    curves = BoxTrainLog()
    b = cfg.batch_per_domain
    for step in range(cfg.steps):
        bs = rng.integers(0, len(xs), size=b)
        bt = rng.integers(0, len(xt), size=b)
        eta = cfg.eta_coeff * warmup(step / cfg.steps) if cfg.eta_warmup else cfg.eta_coeff
        tape = ad.Tape()
        terms = forward_loss(tape, a, xs[bs], ys[bs], ts[bs], xt[bt], yt[bt], eta, cfg.disparity)
        value = terms["total"].item()
        if not np.isfinite(value):
            raise DivergenceError("box_adaptor", step, value)
        tape.backward(terms["total"])
        ad.sgd_step(a.store, cfg.lr)
        curves.src.append(terms["src"].item())
        curves.disp_s.append(terms["disp_s"].item())
        curves.disp_t.append(terms["disp_t"].item())
    return a, curves


def pseudo_label_boxes(a: BoxAdaptor, tgt_fg: ProposalSet, images_by_id: Mapping,
                       enlarge_factor: float = 2.0) -> tuple[ProposalSet, np.ndarray]:
    """Copy of ``tgt_fg`` with ``b_reg``; also returns a per-row fallback flag.

    Offsets come from ``G_reg``'s block for ``y_cls`` and are applied to the
    original ``b_det`` (features are read from the enlarged crop). A box
    that collapses after clipping is replaced by ``b_det`` and flagged.
    """
    out = tgt_fg.copy()
    fallback = np.zeros(len(out), dtype=bool)
    if len(out) == 0:
        return out, fallback
    if np.any(out.y_cls < 0) or np.any(out.y_cls >= a.n_classes):
        raise ValueError("pseudo boxes need a foreground y_cls on every row")
    x = enlarged_features(out, images_by_id, enlarge_factor)
    t = np.take_along_axis(a.offsets(x), class_columns(out.y_cls, a.n_classes), axis=1)
    t = t / BOX_CODER_WEIGHTS
    for sid, idx in out.groups().items():
        boxes = decode(out.b_det[idx], t[idx], images_by_id[sid].size, max_log_scale=MAX_LOG_SCALE)
        bad = ((boxes[:, 2] - boxes[:, 0]) < MIN_BOX_SIZE) | ((boxes[:, 3] - boxes[:, 1]) < MIN_BOX_SIZE)
        boxes[bad] = out.b_det[idx][bad]
        fallback[idx] = bad
        out.b_reg[idx] = boxes
    return out, fallback
