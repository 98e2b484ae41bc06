"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` is rebuilt for every training step. Each primitive appends a
:class:`Node` holding its value and a closure that maps the output gradient
to parent gradients; :meth:`Tape.backward` walks the tape in reverse id
order. Trainable arrays live in a :class:`ParamStore` and are bound to a tape
with :meth:`Tape.param`; their gradients are accumulated into the store when
``backward`` finishes.

The min-max objectives are written as a single loss with
:func:`grad_reverse` between the feature extractor and the adversary.
"""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import BatchCompositionError, CheckpointError, NonFiniteGradientError

SIGMOID_EPS = 1e-7

Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Node:
    __slots__ = ("tape", "id", "data", "_grad", "op", "parents", "attrs", "requires_grad",
                 "_backward", "param_ref")

    def __init__(self, tape, data, op, parents, attrs, requires_grad, backward):
        self.tape = tape
        self.id = len(tape.nodes)
        self.data = data
        self._grad = None
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.requires_grad = requires_grad
        self._backward = backward
        self.param_ref = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        return add(self, _lift(self.tape, other))

    def __sub__(self, other):
        return sub(self, _lift(self.tape, other))

    def __rsub__(self, other):
        return sub(_lift(self.tape, other, like=self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(self.tape, other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op}, shape={self.shape})"


def _lift(tape, value, like: Node | None = None) -> Node:
    if isinstance(value, Node):
        return value
    arr = np.asarray(value, dtype=np.float64)
    if like is not None and arr.shape != like.shape:
        arr = np.broadcast_to(arr, like.shape).copy()
    return tape.constant(arr)


class Tape:
    """Append-only list of nodes; ids are positions, so parents precede children."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._params: list[Node] = []

    def record(self, data, op, parents=(), attrs=None, backward: Backward | None = None) -> Node:
        requires = backward is not None and any(p.requires_grad for p in parents)
        node = Node(self, data, op, tuple(parents), attrs or {}, requires, backward if requires else None)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self.record(np.asarray(value, dtype=np.float64), "const")

    def variable(self, value) -> Node:
        node = self.record(np.array(value, dtype=np.float64), "leaf")
        node.requires_grad = True
        return node

    def param(self, store: "ParamStore", name: str) -> Node:
        node = self.record(store.params[name], "param", attrs={"name": name})
        node.requires_grad = True
        node.param_ref = (store, name)
        self._params.append(node)
        return node

    def backward(self, root: Node) -> None:
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if root.data.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        root._grad = np.ones_like(root.data)
        for node in reversed(self.nodes[: root.id + 1]):
            if node._backward is None or node._grad is None:
                continue
            grads = node._backward(node._grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent._grad is None:
                    parent._grad = np.array(g, dtype=np.float64).reshape(parent.shape)
                else:
                    parent._grad = parent._grad + g.reshape(parent.shape)
        for node in self._params:
            if node._grad is not None:
                store, name = node.param_ref
                store.grads[name] += node._grad


# ----------------------------------------------------------------------------
# primitives


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; ``b`` may be a bias row broadcast over the rows of ``a``."""
    bias = a.shape != b.shape
    if bias and not (b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]):
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g, (g.sum(axis=0) if bias else g)

    return a.tape.record(a.data + b.data, "add", (a, b), backward=backward)


def sub(a: Node, b: Node) -> Node:
    bias = a.shape != b.shape
    if bias and not (b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]):
        raise ValueError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g, -(g.sum(axis=0) if bias else g)

    return a.tape.record(a.data - b.data, "sub", (a, b), backward=backward)


def mul(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ValueError(f"mul: shapes must match, got {a.shape} and {b.shape}")

    def backward(g):
        return g * b.data, g * a.data

    return a.tape.record(a.data * b.data, "mul", (a, b), backward=backward)


def scale(x: Node, c: float) -> Node:
    return x.tape.record(x.data * c, "scale", (x,), {"c": c}, backward=lambda g: (g * c,))


def matmul(a: Node, b: Node) -> Node:
    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return a.tape.record(a.data @ b.data, "matmul", (a, b), backward=backward)


def relu(x: Node) -> Node:
    mask = x.data > 0
    return x.tape.record(np.where(mask, x.data, 0.0), "relu", (x,), backward=lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Node) -> Node:
    """Logistic function clamped to ``[1e-7, 1 - 1e-7]`` so logs stay finite."""
    raw = _sigmoid(x.data)
    s = np.clip(raw, SIGMOID_EPS, 1.0 - SIGMOID_EPS)
    inside = s == raw

    def backward(g):
        return (g * s * (1.0 - s) * inside,)

    return x.tape.record(s, "sigmoid", (x,), backward=backward)


def log(x: Node) -> Node:
    return x.tape.record(np.log(x.data), "log", (x,), backward=lambda g: (g / x.data,))


def mean(x: Node) -> Node:
    n = x.data.size

    def backward(g):
        return (np.full(x.shape, float(g) / n),)

    return x.tape.record(np.asarray(x.data.mean()), "mean", (x,), backward=backward)


def total(x: Node) -> Node:
    return x.tape.record(np.asarray(x.data.sum()), "sum", (x,),
                         backward=lambda g: (np.full(x.shape, float(g)),))


def row_sum(x: Node) -> Node:
    """Sum over the last axis of a 2-D node."""
    return x.tape.record(x.data.sum(axis=1), "row_sum", (x,),
                         backward=lambda g: (np.repeat(g[:, None], x.shape[1], axis=1),))


def concat(xs: Sequence[Node]) -> Node:
    """Concatenate along the last dimension."""
    widths = [x.shape[-1] for x in xs]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return xs[0].tape.record(np.concatenate([x.data for x in xs], axis=-1), "concat",
                             tuple(xs), {"widths": widths}, backward=backward)


def slice_cols(x: Node, start: int, stop: int) -> Node:
    def backward(g):
        out = np.zeros_like(x.data)
        out[..., start:stop] = g
        return (out,)

    return x.tape.record(x.data[..., start:stop], "slice", (x,), {"start": start, "stop": stop},
                         backward=backward)


def take_rows(x: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return x.tape.record(x.data[idx], "take_rows", (x,), backward=backward)


def gather_cols(x: Node, cols) -> Node:
    """Per-row column gather: ``out[i, j] = x[i, cols[i, j]]``."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(x.shape[0])[:, None]

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (np.broadcast_to(rows, cols.shape), cols), g)
        return (out,)

    return x.tape.record(x.data[rows, cols], "gather_cols", (x,), backward=backward)


def detach(x: Node) -> Node:
    """Same value, no gradient path upstream."""
    return x.tape.record(x.data, "detach", (x,))


def grad_reverse(x: Node, lambda_coeff: float) -> Node:
    """Identity forward; multiplies the incoming gradient by ``-lambda_coeff``."""
    if lambda_coeff < 0:
        raise ValueError("grad_reverse coefficient must be non-negative")
    c = -float(lambda_coeff)
    return x.tape.record(x.data, "grad_reverse", (x,), {"lambda": lambda_coeff},
                         backward=lambda g: (g * c,))


def smooth_l1(x: Node) -> Node:
    """Elementwise Huber with unit threshold: ``0.5 x^2`` inside, ``|x| - 0.5`` outside."""
    a = np.abs(x.data)
    small = a < 1.0
    out = np.where(small, 0.5 * x.data * x.data, a - 0.5)
    deriv = np.where(small, x.data, np.sign(x.data))
    return x.tape.record(out, "smooth_l1", (x,), backward=lambda g: (g * deriv,))


def cross_entropy(logits: Node, labels, weights=None) -> Node:
    """Mean over rows of ``-log softmax(logits)[label]``.

    Optional per-row ``weights`` scale each row's term; the normaliser stays
    the row count.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError("one label per row expected")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    losses = lse - z[rows, labels]
    value = np.asarray((w * losses).sum() / n)
    probs = np.exp(z - lse[:, None])

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (w / n * float(g))[:, None],)

    return logits.tape.record(value, "cross_entropy", (logits,), backward=backward)


def weighted_bce(d_out: Node, is_source, weights) -> Node:
    """Weighted domain-discriminator objective.

    Returns ``mean_s w log d + mean_t w log(1 - d)``, each expectation taken
    within its own domain. This is the quantity the discriminator maximises.
    """
    d = d_out.data.reshape(-1)
    src = np.asarray(is_source, dtype=bool).reshape(-1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    n_s, n_t = int(src.sum()), int((~src).sum())
    if n_s == 0 or n_t == 0:
        raise BatchCompositionError(f"need both domains in a batch (source={n_s}, target={n_t})")
    d = np.clip(d, SIGMOID_EPS, 1.0 - SIGMOID_EPS)
    value = (w[src] * np.log(d[src])).sum() / n_s + (w[~src] * np.log(1.0 - d[~src])).sum() / n_t

    def backward(g):
        grad = np.where(src, w / (n_s * d), -w / (n_t * (1.0 - d)))
        return ((grad * float(g)).reshape(d_out.shape),)

    return d_out.tape.record(np.asarray(value), "weighted_bce", (d_out,), backward=backward)


def binary_cross_entropy(p: Node, targets) -> Node:
    """``-mean(y log p + (1 - y) log(1 - p))`` composed from primitives."""
    y = np.asarray(targets, dtype=np.float64).reshape(p.shape)
    tape = p.tape
    pos = mul(log(p), tape.constant(y))
    neg = mul(log(1.0 - p), tape.constant(1.0 - y))
    return scale(mean(add(pos, neg)), -1.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ----------------------------------------------------------------------------
# parameters and optimisation


def glorot(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class ParamStore:
    """Named trainable arrays with SGD-momentum state."""

    def __init__(self, lr: float = 0.01, momentum: float = 0.9, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.velocity: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.velocity[name] = np.zeros_like(value)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def reset_momentum(self) -> None:
        for v in self.velocity.values():
            v[...] = 0.0

    def load(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            if self.params[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            self.params[name][...] = arr

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def sgd_step(store: ParamStore, lr: float | None = None, only: Iterable[str] | None = None) -> None:
    """``v <- m v + g + wd p``; ``p <- p - lr v``; then zero the gradients.

    ``only`` restricts the update to the named parameters (the others keep
    their values and velocity). Raises :class:`NonFiniteGradientError`
    before touching any parameter if a gradient is NaN or infinite.
    """
    lr = store.lr if lr is None else lr
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    m, wd = store.momentum, store.weight_decay
    names = store.params if only is None else only
    for name in names:
        p = store.params[name]
        v = store.velocity[name]
        v *= m
        v += store.grads[name]
        if wd:
            v += wd * p
        p -= lr * v
    store.zero_grad()


class MLP:
    """Fully connected stack with ReLU between layers and a linear output."""

    def __init__(self, prefix: str, sizes: Sequence[int]):
        self.prefix = prefix
        self.sizes = list(sizes)

    def names(self, i: int) -> tuple[str, str]:
        return f"{self.prefix}.w{i}", f"{self.prefix}.b{i}"

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def init(self, store: ParamStore, rng: np.random.Generator) -> None:
        for i in range(self.n_layers):
            w, b = self.names(i)
            store.add(w, glorot(self.sizes[i], self.sizes[i + 1], rng))
            store.add(b, np.zeros(self.sizes[i + 1]))

    def __call__(self, tape: Tape, store: ParamStore, x: Node) -> Node:
        h = x
        for i in range(self.n_layers):
            w, b = self.names(i)
            h = add(matmul(h, tape.param(store, w)), tape.param(store, b))
            if i < self.n_layers - 1:
                h = relu(h)
        return h

    def predict(self, store: ParamStore, x: np.ndarray) -> np.ndarray:
        h = x
        for i in range(self.n_layers):
            w, b = self.names(i)
            h = h @ store.params[w] + store.params[b]
            if i < self.n_layers - 1:
                h = np.where(h > 0, h, 0.0)
        return h

    def copy_into(self, store: ParamStore, other: "MLP") -> None:
        """Copy this stack's weights onto ``other`` (same architecture) in ``store``."""
        if other.sizes != self.sizes:
            raise ValueError("architectures differ")
        for i in range(self.n_layers):
            for src, dst in zip(self.names(i), other.names(i)):
                store.params[dst][...] = store.params[src]


# ----------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "dadapt.checkpoint"
CHECKPOINT_VERSION = 1


def _payload(params: dict[str, np.ndarray], meta: dict) -> dict:
    return {
        "meta": meta,
        "params": [
            {"name": name, "shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
            for name, arr in params.items()
        ],
    }


def _digest(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, separators=(",", ":")).encode()).hexdigest()


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write parameters as ``{name, shape, values}`` records plus a checksum.

    Floats are written with ``repr`` precision so reloading is bit-exact and
    the file bytes depend only on the parameter values and order.
    """
    payload = _payload(params, meta or {})
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **payload,
           "sha256": _digest(payload)}
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a valid checkpoint ({exc})") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown format {doc.get('format')!r}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: version {doc.get('version')} != {CHECKPOINT_VERSION}")
    payload = {"meta": doc.get("meta"), "params": doc.get("params")}
    if _digest(payload) != doc.get("sha256"):
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")
    params = {
        rec["name"]: np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
        for rec in doc["params"]
    }
    return params, doc["meta"]


def iter_param_names(stores: Iterable[ParamStore]) -> Iterable[str]:
    for s in stores:
        yield from s.params
