"""Category adaptor: a proposal classifier aligned across domains.

``F_cls`` maps crop features to a hidden representation ``f``, ``G_cls``
predicts one of ``K + 1`` labels (``K`` is background) and the discriminator
``D`` sees ``f`` together with the detached class probabilities ``g``. Only
proposals whose detector confidence clears the threshold take part in the
domain game, which keeps the ambiguous half-overlapping crops out of it.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, DivergenceError
from .proposals import ProposalSet, crop_features
from .rng import derive_rng

log = logging.getLogger(__name__)


def weight(c_det, threshold: float = 0.5):
    """1 for confidence strictly above ``threshold``, else 0 (elementwise)."""
    w = (np.asarray(c_det, dtype=np.float64) > threshold).astype(np.float64)
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True)
class CatAdaptorConfig:
    hidden: int = 32
    disc_hidden: int = 32
    steps: int = 2000
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_per_domain: int = 32
    lambda_coeff: float = 1.0
    weight_threshold: float = 0.5
    use_weight: bool = True
    condition: bool = True
    bg_source: bool = True
    bg_target: bool = True
    foreground_only: bool = False


class CatAdaptor:
    def __init__(self, n_classes: int, d_feat: int, hidden: int = 32, disc_hidden: int = 32,
                 condition: bool = True):
        self.n_classes = n_classes
        self.d_feat = d_feat
        self.hidden = hidden
        self.disc_hidden = disc_hidden
        self.condition = condition
        self.store = ad.ParamStore()
        self.f_cls = ad.MLP("cat.F", [d_feat, hidden, hidden])
        self.g_cls = ad.MLP("cat.G", [hidden, n_classes + 1])
        d_in = hidden + (n_classes + 1 if condition else 0)
        self.disc = ad.MLP("cat.D", [d_in, disc_hidden, disc_hidden, 1])

    @property
    def heads(self):
        return (self.f_cls, self.g_cls, self.disc)

    @classmethod
    def create(cls, n_classes: int, d_feat: int, cfg: CatAdaptorConfig,
               rng: np.random.Generator) -> "CatAdaptor":
        a = cls(n_classes, d_feat, cfg.hidden, cfg.disc_hidden, cfg.condition)
        for head in a.heads:
            head.init(a.store, rng)
        return a

    def features(self, x: np.ndarray) -> np.ndarray:
        """Hidden representation ``f``; ``F_cls`` ends in a ReLU like a backbone."""
        return np.maximum(self.f_cls.predict(self.store, x), 0.0)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.g_cls.predict(self.store, self.features(x))

    def meta(self) -> dict:
        return {"kind": "cat_adaptor", "n_classes": self.n_classes, "d_feat": self.d_feat,
                "hidden": self.hidden, "disc_hidden": self.disc_hidden, "condition": self.condition}

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.store.params, self.meta())

    @classmethod
    def load(cls, path) -> "CatAdaptor":
        params, meta = ad.load_checkpoint(path)
        if meta.get("kind") != "cat_adaptor":
            raise CheckpointError(f"{path} is not a category adaptor checkpoint")
        a = cls(meta["n_classes"], meta["d_feat"], meta["hidden"], meta["disc_hidden"], meta["condition"])
        for name, value in params.items():
            a.store.add(name, value)
        return a


def forward_loss(tape: ad.Tape, a: CatAdaptor, xs, ys, xt, ws, wt, lambda_coeff: float,
                 ) -> dict[str, ad.Node]:
    """Loss terms for one step.

    ``total = CE(source) - adv`` where ``adv`` is the weighted discriminator
    objective. ``D`` descends ``-adv`` directly while ``F_cls`` receives
    ``lambda_coeff * d adv / d f`` through the reversal node, so it works
    against the discriminator.
    """
    st = a.store
    x = tape.constant(np.concatenate([xs, xt]))
    f = ad.relu(a.f_cls(tape, st, x))
    g = a.g_cls(tape, st, f)
    n_s = len(xs)
    ce = ad.cross_entropy(ad.take_rows(g, np.arange(n_s)), ys)
    terms = {"cls": ce}
    w = np.concatenate([ws, wt])
    if lambda_coeff == 0 or not (ws.any() and wt.any()):
        terms["adv"] = tape.constant(0.0)
        terms["total"] = ce
        return terms
    d_in = ad.grad_reverse(f, lambda_coeff)
    if a.condition:
        d_in = ad.concat([d_in, tape.constant(ad.softmax(g.data))])
    d = ad.sigmoid(a.disc(tape, st, d_in))
    is_src = np.arange(len(w)) < n_s
    adv = ad.weighted_bce(d, is_src, w)
    terms["adv"] = adv
    terms["total"] = ad.sub(ce, adv)
    return terms


@dataclass
class CatTrainLog:
    cls: list[float] = field(default_factory=list)
    adv: list[float] = field(default_factory=list)
    skipped_adv: int = 0


def _select(props: ProposalSet, labels: np.ndarray, n_classes: int, keep_bg: bool, fg_only: bool):
    keep = np.ones(len(props), dtype=bool)
    if fg_only or not keep_bg:
        keep &= labels < n_classes
    return np.flatnonzero(keep)


def train_category_adaptor(src: ProposalSet, tgt: ProposalSet, images_by_id: Mapping, n_classes: int,
                           cfg: CatAdaptorConfig, seed: int, init: CatAdaptor | None = None,
                           ) -> tuple[CatAdaptor, CatTrainLog]:
    """Train on labelled source proposals and unlabelled target proposals.

    Source labels come from ``y_gt``; the target side uses ``y_det`` only to
    decide which proposals count as background for the ``bg_target`` and
    ``foreground_only`` filters. ``init`` continues from a copy of an earlier
    adaptor (momentum restarts at zero) instead of a fresh initialisation.
    """
    if np.any(src.y_gt < 0):
        raise ValueError("source proposals need y_gt labels")
    si = _select(src, src.y_gt, n_classes, cfg.bg_source, cfg.foreground_only)
    ti = _select(tgt, tgt.y_det, n_classes, cfg.bg_target, cfg.foreground_only)
    if len(si) == 0 or len(ti) == 0:
        raise ValueError(f"category adaptor needs both domains (source={len(si)}, target={len(ti)})")
    rng = derive_rng(seed, "cat_adaptor")
    x_all_s = crop_features(src, images_by_id)
    x_all_t = crop_features(tgt, images_by_id)
    if init is None:
        a = CatAdaptor.create(n_classes, x_all_s.shape[1], cfg, rng)
    else:
        if init.meta() != CatAdaptor(n_classes, x_all_s.shape[1], cfg.hidden, cfg.disc_hidden, cfg.condition).meta():
            raise ValueError("init adaptor does not match the requested architecture")
        a = copy.deepcopy(init)
        a.store.reset_momentum()
    a.store.momentum, a.store.weight_decay = cfg.momentum, cfg.weight_decay
    xs, ys, xt = x_all_s[si], src.y_gt[si], x_all_t[ti]
    if cfg.use_weight:
        ws, wt = weight(src.c_det[si], cfg.weight_threshold), weight(tgt.c_det[ti], cfg.weight_threshold)
    else:
        ws, wt = np.ones(len(si)), np.ones(len(ti))
    curves = CatTrainLog()
    b = cfg.batch_per_domain
    for step in range(cfg.steps):
        bs = rng.integers(0, len(si), size=b)
        bt = rng.integers(0, len(ti), size=b)
        tape = ad.Tape()
        terms = forward_loss(tape, a, xs[bs], ys[bs], xt[bt], ws[bs], wt[bt], cfg.lambda_coeff)
        value = terms["total"].item()
        if not np.isfinite(value):
            raise DivergenceError("category_adaptor", step, value)
        if cfg.lambda_coeff and terms["adv"].op == "const":
            curves.skipped_adv += 1
            log.debug("step %d: no weighted proposals in one domain, adversarial term skipped", step)
        tape.backward(terms["total"])
        ad.sgd_step(a.store, cfg.lr)
        curves.cls.append(terms["cls"].item())
        curves.adv.append(terms["adv"].item())
    return a, curves


def pseudo_label_categories(a: CatAdaptor, tgt: ProposalSet, images_by_id: Mapping) -> ProposalSet:
    """Copy of ``tgt`` with ``y_cls`` = argmax of the adaptor's ``K + 1`` logits."""
    out = tgt.copy()
    if len(tgt) == 0:
        return out
    logits = a.logits(crop_features(tgt, images_by_id))
    out.y_cls = np.argmax(logits, axis=1).astype(np.int64)
    return out
