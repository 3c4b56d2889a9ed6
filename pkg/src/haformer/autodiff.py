"""Reverse-mode differentiation over the :mod:`haformer.tensor_core` kernels.

Every op takes :class:`Node` (or raw arrays, wrapped as constants) and returns
a Node. When a :class:`Tape` is active the node is recorded together with its
adjoint rule; otherwise only the value is kept, so inference does not hold the
graph in memory.
"""

from __future__ import annotations

import contextvars
import math

import numpy as np

from . import tensor_core as tc
from .tensor_core import ConvSpec, ShapeError


class Node:
    __slots__ = ("value", "parents", "adjoint", "grad", "op", "name")

    def __init__(self, value, parents=(), adjoint=None, op="const", name=None):
        self.value = value
        self.parents = parents
        self.adjoint = adjoint
        self.grad = None
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape})"


_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("tape", default=None)


class Tape:
    """Creation-ordered record of nodes plus a registry of named leaves."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def __enter__(self):
        self._token = _tape.set(self)
        return self

    def __exit__(self, *exc):
        _tape.reset(self._token)
        return False

    def leaf(self, name, value):
        if name in self.params:
            return self.params[name]
        node = Node(value, op="leaf", name=name)
        self.params[name] = node
        self.nodes.append(node)
        return node

    def backward(self, loss: Node, names=None) -> dict[str, np.ndarray]:
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        for n in self.nodes:
            n.grad = None
        loss.grad = np.ones_like(loss.value)
        for n in reversed(self.nodes):
            if n.grad is None or n.adjoint is None:
                continue
            grads = n.adjoint(n.grad)
            for parent, g in zip(n.parents, grads):
                if g is None or parent.op == "const":
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=parent.value.dtype, copy=True)
                else:
                    parent.grad += g
        wanted = self.params if names is None else names
        out = {}
        for name in wanted:
            if name not in self.params:
                raise KeyError(f"parameter {name!r} is not registered on this tape")
            node = self.params[name]
            out[name] = node.grad if node.grad is not None else np.zeros_like(node.value)
        return out


def current_tape() -> Tape | None:
    return _tape.get()


def leaf(value, name):
    """Named leaf: registered on the active tape, a plain constant otherwise."""
    t = current_tape()
    if t is None:
        return Node(value, op="leaf", name=name)
    return t.leaf(name, value)


def const(value):
    return value if isinstance(value, Node) else Node(np.asarray(value))


def _record(value, parents, adjoint, op):
    t = current_tape()
    if t is None:
        return Node(value, op=op)
    node = Node(value, tuple(parents), adjoint, op)
    t.nodes.append(node)
    return node


class Params:
    """Prefix view over a flat ``name -> array`` store that hands out leaves."""

    def __init__(self, store, prefix=""):
        self.store = store
        self.prefix = prefix

    def __getitem__(self, key) -> Node:
        name = self.prefix + key
        return leaf(self.store[name], name)

    def __contains__(self, key):
        return self.prefix + key in self.store

    def sub(self, prefix) -> "Params":
        return Params(self.store, self.prefix + prefix + ".")


# ---------------------------------------------------------------------------
# differentiable ops


def conv2d(x, w, b, spec: ConvSpec):
    x, w = const(x), const(w)
    b = const(b) if b is not None else None
    out = tc.conv2d(x.value, w.value, None if b is None else b.value, spec)

    def adjoint(g):
        gx, gw, gb = tc.conv2d_backward(x.value, w.value, spec, g)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, adjoint, "conv2d")


def matmul(a, b):
    a, b = const(a), const(b)
    out = tc.matmul(a.value, b.value)
    return _record(out, (a, b), lambda g: (g @ b.value.T, a.value.T @ g), "matmul")


def softmax(x, axis=-1):
    x = const(x)
    y = tc.softmax(x.value, axis)
    return _record(y, (x,), lambda g: (tc.softmax_backward(y, g, axis),), "softmax")


def global_avg_pool_spatial(x):
    x = const(x)
    c, h, w = x.value.shape
    out = tc.global_avg_pool_spatial(x.value)
    return _record(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.value.shape),), "gap")


def channel_mean_map(x):
    x = const(x)
    c = x.value.shape[0]
    out = tc.channel_mean_map(x.value)
    return _record(out, (x,), lambda g: (np.broadcast_to(g / c, x.value.shape),), "channel_mean")


def channel_shuffle(x, groups):
    x = const(x)
    out = tc.channel_shuffle(x.value, groups)
    c = x.value.shape[0]
    # inverse of a (g, c/g) shuffle is a (c/g, g) shuffle
    return _record(out, (x,), lambda g: (tc.channel_shuffle(g, c // groups),), "shuffle")


def bilinear_upsample(x, size):
    x = const(x)
    hw = x.value.shape[1:]
    out = tc.bilinear_upsample(x.value, size)
    return _record(out, (x,), lambda g: (tc.bilinear_upsample_backward(g, hw),), "upsample")


def relu(x):
    x = const(x)
    out = tc.relu(x.value)
    return _record(out, (x,), lambda g: (g * (x.value > 0),), "relu")


def prelu(x, slope):
    x, slope = const(x), const(slope)
    out = tc.prelu(x.value, slope.value)

    def adjoint(g):
        pos = x.value > 0
        s = slope.value.reshape((-1,) + (1,) * (x.value.ndim - 1))
        gx = np.where(pos, g, s * g)
        gs = np.where(pos, 0, g * x.value).reshape(x.value.shape[0], -1).sum(1)
        return gx, gs

    return _record(out, (x, slope), adjoint, "prelu")


def sigmoid(x):
    x = const(x)
    y = tc.sigmoid(x.value)
    return _record(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def gelu(x):
    x = const(x)
    out = tc.gelu(x.value)
    return _record(out, (x,), lambda g: (g * tc.gelu_grad(x.value),), "gelu")


def activation(x, kind, slope=None):
    if kind == "relu":
        return relu(x)
    if kind == "prelu":
        return prelu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}")


def add(a, b):
    a, b = const(a), const(b)
    out = tc.elementwise(a.value, b.value, "add")
    return _record(out, (a, b), lambda g: (tc.unbroadcast(g, a.value.shape), tc.unbroadcast(g, b.value.shape)), "add")


def mul(a, b):
    a, b = const(a), const(b)
    out = tc.elementwise(a.value, b.value, "mul")

    def adjoint(g):
        return tc.unbroadcast(g * b.value, a.value.shape), tc.unbroadcast(g * a.value, b.value.shape)

    return _record(out, (a, b), adjoint, "mul")


def elementwise(a, b, op):
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def scale(x, alpha):
    x = const(x)
    return _record(x.value * alpha, (x,), lambda g: (g * alpha,), "scale")


def add_bias(x, b):
    """Row-broadcast bias for token matrices ``[N, D] + [D]``."""
    x, b = const(x), const(b)
    return _record(x.value + b.value, (x, b), lambda g: (g, g.sum(0)), "add_bias")


def reshape(x, shape):
    x = const(x)
    old = x.value.shape
    out = tc.reshape(x.value, shape)
    return _record(out, (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x, axes):
    x = const(x)
    inv = tuple(int(i) for i in np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.value, axes))
    return _record(out, (x,), lambda g: (np.transpose(g, inv),), "permute")


def transpose2d(x):
    x = const(x)
    return _record(tc.transpose2d(x.value), (x,), lambda g: (g.T,), "transpose")


def concat(xs, axis=0):
    xs = [const(x) for x in xs]
    out = tc.concat([x.value for x in xs], axis)
    bounds = np.cumsum([0] + [x.value.shape[axis] for x in xs])

    def adjoint(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _record(out, xs, adjoint, "concat")


def columns(x, start, stop):
    """Column slice ``x[:, start:stop]`` of a token matrix."""
    x = const(x)
    out = np.ascontiguousarray(x.value[:, start:stop])

    def adjoint(g):
        full = np.zeros_like(x.value)
        full[:, start:stop] = g
        return (full,)

    return _record(out, (x,), adjoint, "columns")


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = const(x), const(gamma), const(beta)
    out, xhat, inv = tc.layer_norm(x.value, gamma.value, beta.value, eps)
    return _record(out, (x, gamma, beta), lambda g: tc.layer_norm_backward(g, xhat, inv, gamma.value), "layer_norm")


def total(x):
    x = const(x)
    return _record(np.asarray(x.value.sum()).reshape(1), (x,), lambda g: (np.broadcast_to(g[0], x.value.shape),), "sum")


def weighted_sum(x, weights):
    """``sum(x * weights)`` with a constant weight array; a generic scalar probe."""
    x = const(x)
    w = np.asarray(weights, dtype=x.value.dtype)
    return _record(np.asarray((x.value * w).sum()).reshape(1), (x,), lambda g: (g[0] * w,), "weighted_sum")


IGNORE_INDEX = 255


def cross_entropy(logits, labels, ignore_index=IGNORE_INDEX):
    """Mean pixelwise cross-entropy of ``[K, H, W]`` logits against ``[H, W]`` ids."""
    logits = const(logits)
    z = logits.value
    k = z.shape[0]
    labels = np.asarray(labels)
    if labels.shape != z.shape[1:]:
        raise ShapeError(f"label map {labels.shape} does not match logits {z.shape[1:]}")
    valid = labels != ignore_index
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise ValueError(f"labels must lie in [0, {k}) or equal {ignore_index}")
    count = int(valid.sum())
    p = tc.softmax(z, axis=0)
    if count == 0:
        return _record(np.zeros(1, dtype=z.dtype), (logits,), lambda g: (np.zeros_like(z),), "cross_entropy")
    safe = np.where(valid, labels, 0)
    rows, cols = np.nonzero(valid)
    zmax = z.max(axis=0)
    logsum = zmax + np.log(np.exp(z - zmax).sum(axis=0))
    nll = logsum[rows, cols] - z[safe[rows, cols], rows, cols]
    loss = np.asarray(nll.sum() / count, dtype=z.dtype).reshape(1)

    def adjoint(g):
        grad = p.copy()
        grad[safe[rows, cols], rows, cols] -= 1
        grad *= valid[None]
        return (grad * (g[0] / count),)

    return _record(loss, (logits,), adjoint, "cross_entropy")


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grad(f, x, eps=1e-3):
    """Central differences of scalar ``f`` at ``x``, evaluated in float64."""
    x64 = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x64)
    flat = x64.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(np.asarray(f(x64)).reshape(-1)[0])
        flat[i] = orig - eps
        lo = float(np.asarray(f(x64)).reshape(-1)[0])
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a) + np.abs(b)), initial=0.0))


def check_gradients(loss_fn, store, inputs=None, eps=1e-3):
    """Compare tape gradients with finite differences for every entry of
    ``store`` (and ``inputs``). ``loss_fn(params, inputs) -> Node``.

    Returns ``{name: max_rel_err}``.
    """
    inputs = dict(inputs or {})
    with Tape() as tape:
        leaves = {k: leaf(v, "input:" + k) for k, v in inputs.items()}
        loss = loss_fn(Params(store), leaves)
        grads = tape.backward(loss)
    store64 = {k: np.array(v, dtype=np.float64) for k, v in store.items()}
    in64 = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    errs = {}
    for name in list(store) + ["input:" + k for k in inputs]:
        if name.startswith("input:"):
            key = name[6:]
            target = in64
        else:
            key = name
            target = store64

        def f(v, key=key, target=target):
            saved = target[key]
            target[key] = v
            try:
                return loss_fn(Params(store64), {k: Node(a) for k, a in in64.items()}).value
            finally:
                target[key] = saved

        fd = finite_diff_grad(f, target[key], eps)
        analytic = grads.get(name)
        if analytic is None:
            analytic = np.zeros_like(fd)
        errs[name] = rel_err(analytic, fd)
    return errs


def grad_check(block, tol=1e-3, seed=0):
    """Run backward against finite differences for a named composite block.

    ``block`` is one of the names in :data:`GRAD_FIXTURES` (or a callable
    returning ``(loss_fn, store, inputs)``). Never raises; failures are
    reported in the result.
    """
    try:
        if callable(block):
            loss_fn, store, inputs = block(seed)
        else:
            from .checks import GRAD_FIXTURES

            loss_fn, store, inputs = GRAD_FIXTURES[block](seed)
        errors = check_gradients(loss_fn, store, inputs)
        worst = max(errors.values(), default=0.0)
        ok = bool(math.isfinite(worst) and worst <= tol)
        return {"max_rel_err": worst, "pass": ok, "errors": errors}
    except Exception as exc:  # noqa: BLE001 - report, don't raise
        return {"max_rel_err": math.inf, "pass": False, "errors": {}, "error": repr(exc)}
