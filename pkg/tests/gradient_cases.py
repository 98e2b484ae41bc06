"""Finite-difference cases for every primitive and every composite loss.

Each case returns ``(errors, dead)`` from :func:`oracles.finite_difference_errors`.
Composite losses are re-evaluated by plain numpy forwards (``MLP.predict``
and the scalar oracles), never by the tape that produced the analytic
gradient. Where the tape stops a gradient on purpose (``detach``) or flips it
(``grad_reverse``), the numpy objective freezes or negates the same path.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from dadapt import autodiff as ad
from dadapt import box_adaptor as boxa
from dadapt import cat_adaptor as cata
from dadapt import detector as det
from dadapt.geometry import pairwise_iou

import oracles

K = 3
D_FEAT = 6
HIDDEN = 5


def _run_leaves(arrays, build, rng):
    def value():
        tape = ad.Tape()
        return build(tape, [tape.variable(a) for a in arrays]).item()

    tape = ad.Tape()
    nodes = [tape.variable(a) for a in arrays]
    tape.backward(build(tape, nodes))
    return oracles.finite_difference_errors(value, arrays, [n.grad for n in nodes], rng)


def _project(tape, y, r):
    return ad.total(ad.mul(y, tape.constant(r)))


def _unary(op, make_input):
    def case(rng):
        x = make_input(rng)
        r = rng.normal(size=op(ad.Tape().variable(x)).shape)
        return _run_leaves([x], lambda t, n: _project(t, op(n[0]), r), rng)
    return case


def _away_from(rng, shape, kinks, margin=0.05):
    x = rng.normal(size=shape) * 2
    for k in kinks:
        close = np.abs(x - k) < margin
        x[close] += 2 * margin
    return x


def _binary(op, shape_a, shape_b):
    def case(rng):
        a, b = rng.normal(size=shape_a), rng.normal(size=shape_b)
        probe = ad.Tape()
        r = rng.normal(size=op(probe.variable(a), probe.variable(b)).shape)
        return _run_leaves([a, b], lambda t, n: _project(t, op(n[0], n[1]), r), rng)
    return case


def _case_concat(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    r = rng.normal(size=(4, 5))
    return _run_leaves([a, b], lambda t, n: _project(t, ad.concat(n), r), rng)


def _case_take_rows(rng):
    x = rng.normal(size=(5, 3))
    idx = np.array([4, 0, 0, 2])
    r = rng.normal(size=(4, 3))
    return _run_leaves([x], lambda t, n: _project(t, ad.take_rows(n[0], idx), r), rng)


def _case_gather_cols(rng):
    x = rng.normal(size=(5, 8))
    cols = rng.integers(0, 8, size=(5, 4))
    r = rng.normal(size=(5, 4))
    return _run_leaves([x], lambda t, n: _project(t, ad.gather_cols(n[0], cols), r), rng)


def _case_cross_entropy(rng):
    x = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    w = rng.uniform(0.2, 1.0, size=6)
    return _run_leaves([x], lambda t, n: ad.cross_entropy(n[0], labels, w), rng)


def _case_weighted_bce(rng):
    d = rng.uniform(0.1, 0.9, size=(8, 1))
    src = np.arange(8) < 3
    w = rng.uniform(0.2, 1.0, size=8)
    return _run_leaves([d], lambda t, n: ad.weighted_bce(n[0], src, w), rng)


def _case_binary_cross_entropy(rng):
    p = rng.uniform(0.1, 0.9, size=(7, 1))
    y = rng.integers(0, 2, size=7)
    return _run_leaves([p], lambda t, n: ad.binary_cross_entropy(n[0], y), rng)


def _case_grad_reverse(lam):
    def case(rng):
        x = rng.normal(size=(3, 4))
        r = rng.normal(size=(3, 4))

        def build(t, n):
            return _project(t, ad.grad_reverse(n[0], lam), r)

        tape = ad.Tape()
        node = tape.variable(x)
        tape.backward(build(tape, [node]))
        # the numeric derivative of the identity forward is r; the tape must give -lam * r
        expected = -lam * r
        err = np.abs(node.grad - expected).max()
        return [float(err)], 0.0
    return case


def _case_offset_iou(rng):
    a = rng.normal(scale=0.5, size=(6, 4))
    b = a + rng.normal(scale=0.5, size=(6, 4))
    r = rng.normal(size=6)
    return _run_leaves([a, b], lambda t, n: _project(t, boxa.offset_iou(n[0], n[1]), r), rng)


PRIMITIVES: dict[str, Callable] = {
    "add": _binary(ad.add, (4, 3), (4, 3)),
    "add_bias": _binary(ad.add, (4, 3), (3,)),
    "sub": _binary(ad.sub, (4, 3), (4, 3)),
    "sub_bias": _binary(ad.sub, (4, 3), (3,)),
    "mul": _binary(ad.mul, (4, 3), (4, 3)),
    "matmul": _binary(ad.matmul, (4, 3), (3, 5)),
    "scale": _unary(lambda x: ad.scale(x, -1.7), lambda r: r.normal(size=(3, 3))),
    "relu": _unary(ad.relu, lambda r: _away_from(r, (4, 4), [0.0])),
    "sigmoid": _unary(ad.sigmoid, lambda r: r.normal(size=(4, 3))),
    "log": _unary(ad.log, lambda r: r.uniform(0.3, 3.0, size=(4, 3))),
    "mean": _unary(ad.mean, lambda r: r.normal(size=(4, 3))),
    "total": _unary(ad.total, lambda r: r.normal(size=(4, 3))),
    "row_sum": _unary(ad.row_sum, lambda r: r.normal(size=(4, 3))),
    "slice_cols": _unary(lambda x: ad.slice_cols(x, 1, 3), lambda r: r.normal(size=(4, 5))),
    "smooth_l1": _unary(ad.smooth_l1, lambda r: _away_from(r, (5, 4), [-1.0, 1.0])),
    "concat": _case_concat,
    "take_rows": _case_take_rows,
    "gather_cols": _case_gather_cols,
    "cross_entropy": _case_cross_entropy,
    "weighted_bce": _case_weighted_bce,
    "binary_cross_entropy": _case_binary_cross_entropy,
    "offset_iou": _case_offset_iou,
    "grad_reverse_0": _case_grad_reverse(0.0),
    "grad_reverse_0.1": _case_grad_reverse(0.1),
    "grad_reverse_1": _case_grad_reverse(1.0),
}


# ----------------------------------------------------------------------------
# numpy forwards for the composite losses


def _np_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _np_ce(logits, labels):
    p = _np_softmax(logits)
    return float(-np.mean(np.log(p[np.arange(len(labels)), labels])))


def _np_sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _np_smooth_l1_rows(diff):
    return np.array([sum(oracles.smooth_l1(v) for v in row) for row in diff])


def _param_fd(store, names, value, rng):
    arrays = [store.params[n] for n in names]
    grads = [store.grads[n].copy() for n in names]
    return oracles.finite_difference_errors(value, arrays, grads, rng)


def _names(*heads):
    return [n for h in heads for i in range(h.n_layers) for n in h.names(i)]


def _merge(*results):
    errs, dead = [], 0.0
    for e, d in results:
        errs += e
        dead = max(dead, d)
    return errs, dead


def _detector(rng):
    cfg = det.DetectorConfig(n_classes=K, d_feat=D_FEAT, hidden=HIDDEN)
    model = det.DetectorModel.create(cfg, rng)
    for name, p in model.store.params.items():
        if ".b" in name:
            p[...] = rng.normal(scale=0.1, size=p.shape)
    return model


def _case_rpn(rng):
    model = _detector(rng)
    x = rng.normal(size=(10, D_FEAT))
    obj = (np.arange(10) % 3 == 0).astype(float)
    t = rng.normal(size=(10, 4))
    tape = ad.Tape()
    terms = det.rpn_loss_terms(tape, model, x, obj, t)
    tape.backward(ad.add(terms["rpn_cls"], terms["rpn_reg"]))
    st = model.store

    def value():
        p = _np_sigmoid(model.rpn_cls.predict(st, x)[:, 0])
        cls = -np.mean(obj * np.log(p) + (1 - obj) * np.log(1 - p))
        pos = obj > 0
        reg = np.mean(_np_smooth_l1_rows(model.rpn_reg.predict(st, x[pos]) - t[pos]))
        return cls + reg

    return _param_fd(st, _names(model.rpn_cls, model.rpn_reg), value, rng)


def _roi_value(model, x, labels, t, fg, x_second=None):
    st = model.store

    def value():
        total = _np_ce(model.cls_head.predict(st, x), labels)
        if x_second is not None:
            total += _np_ce(model.cls_head.predict(st, x_second), labels)
        out = model.reg_head.predict(st, x)
        reg = 0.0
        for i in range(len(labels)):
            if fg[i]:
                c = labels[i]
                reg += sum(oracles.smooth_l1(v) for v in out[i, 4 * c:4 * c + 4] - t[i])
        return total + reg / len(labels)

    return value


def _roi_case(second: bool):
    def case(rng):
        model = _detector(rng)
        n = 12
        x = rng.normal(size=(n, D_FEAT))
        labels = rng.integers(0, K + 1, size=n)
        labels[:3] = [0, 1, 2]
        fg = labels < K
        t = rng.normal(size=(n, 4))
        xs = rng.normal(size=(n, D_FEAT)) if second else None
        tape = ad.Tape()
        terms = det.roi_loss_terms(tape, model, x, labels, t, fg, x_second=xs)
        loss = ad.add(terms["roi_cls"], terms["roi_reg"])
        if second:
            loss = ad.add(loss, terms["roi_cls_reg_crop"])
        tape.backward(loss)
        return _param_fd(model.store, _names(model.cls_head, model.reg_head),
                         _roi_value(model, x, labels, t, fg, xs), rng)
    return case


def _case_discriminator(rng):
    """Weighted domain objective through a small discriminator."""
    mlp = ad.MLP("D", [4, 5, 1])
    st = ad.ParamStore()
    mlp.init(st, rng)
    z = rng.normal(size=(9, 4))
    src = np.arange(9) < 4
    w = (rng.uniform(size=9) > 0.3).astype(float)
    w[[0, 5]] = 1.0
    tape = ad.Tape()
    tape.backward(ad.weighted_bce(ad.sigmoid(mlp(tape, st, tape.constant(z))), src, w))

    def value():
        d = _np_sigmoid(mlp.predict(st, z)[:, 0])
        return oracles.weighted_bce_loop(d, src, w)

    return _param_fd(st, _names(mlp), value, rng)


def _cat(rng, condition=True):
    cfg = cata.CatAdaptorConfig(hidden=HIDDEN, disc_hidden=4, condition=condition)
    a = cata.CatAdaptor.create(K, D_FEAT, cfg, rng)
    for name, p in a.store.params.items():
        if ".b" in name:
            p[...] = rng.normal(scale=0.1, size=p.shape)
    return a


def _case_cat(rng):
    a = _cat(rng)
    lam = 0.7
    xs, xt = rng.normal(size=(6, D_FEAT)), rng.normal(size=(5, D_FEAT))
    ys = rng.integers(0, K + 1, size=6)
    ws = np.array([1, 1, 0, 1, 0, 1.0])
    wt = np.array([0, 1, 1, 1, 0.0])
    tape = ad.Tape()
    tape.backward(cata.forward_loss(tape, a, xs, ys, xt, ws, wt, lam)["total"])
    st = a.store
    x = np.concatenate([xs, xt])
    src = np.arange(len(x)) < len(xs)
    w = np.concatenate([ws, wt])
    p0 = _np_softmax(a.g_cls.predict(st, np.maximum(a.f_cls.predict(st, x), 0)))

    def parts():
        f = np.maximum(a.f_cls.predict(st, x), 0)
        ce = _np_ce(a.g_cls.predict(st, f[: len(xs)]), ys)
        d = _np_sigmoid(a.disc.predict(st, np.concatenate([f, p0], axis=1))[:, 0])
        return ce, oracles.weighted_bce_loop(d, src, w)

    # D descends -adv; G sees only the classification loss; F gets +lam * adv through the reversal
    return _merge(
        _param_fd(st, _names(a.disc), lambda: -parts()[1], rng),
        _param_fd(st, _names(a.g_cls), lambda: parts()[0], rng),
        _param_fd(st, _names(a.f_cls), lambda: parts()[0] + lam * parts()[1], rng),
    )


def _box(rng):
    a = boxa.BoxAdaptor.create(K, D_FEAT, boxa.BoxAdaptorConfig(hidden=HIDDEN), rng)
    for name, p in a.store.params.items():
        if ".b" in name:
            p[...] = rng.normal(scale=0.1, size=p.shape)
    a.reset_adversary()
    for name in _names(a.g_adv):
        a.store.params[name] += rng.normal(scale=0.2, size=a.store.params[name].shape)
    return a


def _box_data(rng):
    xs, xt = rng.normal(size=(6, D_FEAT)), rng.normal(size=(5, D_FEAT))
    ys, yt = rng.integers(0, K, size=6), rng.integers(0, K, size=5)
    ts = rng.normal(scale=0.5, size=(6, 4))
    return xs, ys, ts, xt, yt


def _unit_boxes(t):
    """Boxes decoded from the unit anchor centred at the origin."""
    t = t / det.BOX_CODER_WEIGHTS
    w, h = np.exp(t[:, 2]), np.exp(t[:, 3])
    return np.stack([t[:, 0] - w / 2, t[:, 1] - h / 2, t[:, 0] + w / 2, t[:, 1] + h / 2], axis=1)


def _np_disparity(adv, main, kind):
    if kind == "smooth_l1":
        return float(np.mean(_np_smooth_l1_rows(adv - main)))
    ba, bm = _unit_boxes(adv), _unit_boxes(main)
    return 1.0 - float(np.mean([pairwise_iou(ba[i:i + 1], bm[i:i + 1])[0, 0] for i in range(len(ba))]))


def _box_parts(a, data, kind, r0):
    xs, ys, ts, xt, yt = data
    st = a.store
    x = np.concatenate([xs, xt])
    ns = len(xs)

    def pick(out, labels):
        return np.stack([out[i, 4 * c:4 * c + 4] for i, c in enumerate(labels)])

    def parts():
        f = np.maximum(a.f_reg.predict(st, x), 0)
        r = a.g_reg.predict(st, f)
        adv = a.g_adv.predict(st, f)
        l_src = float(np.mean(_np_smooth_l1_rows(pick(r[:ns], ys) - ts)))
        d_s = _np_disparity(pick(adv[:ns], ys), pick(r0[:ns], ys), kind)
        d_t = _np_disparity(pick(adv[ns:], yt), pick(r0[ns:], yt), kind)
        return l_src, d_t - d_s

    return parts


def _box_case(kind: str, term: str):
    def case(rng):
        a = _box(rng)
        data = _box_data(rng)
        eta = 0.3
        tape = ad.Tape()
        terms = boxa.forward_loss(tape, a, *data, eta=eta, kind=kind)
        tape.backward(terms[term])
        st = a.store
        x = np.concatenate([data[0], data[3]])
        r0 = a.g_reg.predict(st, np.maximum(a.f_reg.predict(st, x), 0))
        parts = _box_parts(a, data, kind, r0)
        if term == "src":
            return _param_fd(st, _names(a.f_reg, a.g_reg), lambda: parts()[0], rng)
        if term == "adv":
            # G_adv sees the plain gradient; F_reg sees it reversed
            return _merge(
                _param_fd(st, _names(a.g_adv), lambda: parts()[1], rng),
                _param_fd(st, _names(a.f_reg), lambda: -parts()[1], rng),
            )
        return _merge(
            _param_fd(st, _names(a.g_adv), lambda: -eta * parts()[1], rng),
            _param_fd(st, _names(a.g_reg), lambda: parts()[0], rng),
            _param_fd(st, _names(a.f_reg), lambda: parts()[0] + eta * parts()[1], rng),
        )
    return case


COMPOSITES: dict[str, Callable] = {
    "detector_rpn_terms": _case_rpn,
    "detector_roi_terms": _roi_case(second=False),
    "detector_target_terms": _roi_case(second=True),
    "domain_objective": _case_discriminator,
    "category_adaptor_total": _case_cat,
    "box_source_risk": _box_case("smooth_l1", "src"),
    "box_disparity_smooth_l1": _box_case("smooth_l1", "adv"),
    "box_disparity_iou": _box_case("iou", "adv"),
    "box_total_smooth_l1": _box_case("smooth_l1", "total"),
    "box_total_iou": _box_case("iou", "total"),
}

ALL_CASES = {**PRIMITIVES, **COMPOSITES}


def run_case(name: str, seed: int = 0) -> tuple[list[float], float]:
    return ALL_CASES[name](np.random.default_rng([seed, sum(map(ord, name))]))


def worst(errors: list[float]) -> float:
    return max(errors) if errors else math.inf
