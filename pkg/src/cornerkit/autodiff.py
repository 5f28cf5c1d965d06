"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Value`` wraps one numpy array together with an accumulated gradient and
the backward rules linking it to its parents.  The op set is the minimal one
needed by the models in this repo: matmul, add/mul/sub, concat, slicing,
leaky-relu, exp/log/sigmoid, softmax, sum/mean/max reductions, plus fused
stable losses.  Broadcasting follows numpy's trailing-axis rules; gradients
of broadcast operands are reduced back to the operand shape.

Graphs are single-threaded; distinct graphs share nothing mutable and may be
used from distinct threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate a primitive's contract."""

    def __init__(self, primitive, *shapes):
        super().__init__(f"{primitive}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Value:
    """Node in the differentiation graph: payload array + gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()  # tuple of (Value, backward_rule)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate gradients of this scalar into every reachable Value.

        Repeated calls without zeroing the gradients accumulate additively.
        """
        if self.data.size != 1:
            raise ShapeError("backward: loss must be scalar", self.data.shape)
        order = _toposort(self)
        seed = {id(self): np.ones_like(self.data)}
        for node in order:
            g = seed.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            for parent, rule in node._parents:
                pg = rule(g)
                if id(parent) in seed:
                    # non-inplace: pg may be a view of g or of another seed
                    seed[id(parent)] = seed[id(parent)] + pg
                else:
                    seed[id(parent)] = pg

    def detach(self):
        return Value(self.data.copy())

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self):
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _toposort(root):
    """Reverse topological order of the parent DAG (iterative)."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            stack.append((parent, False))
    return list(reversed(order))


def asvalue(x):
    return x if isinstance(x, Value) else Value(x)


def _track(data, *parent_rules):
    """Build the output node, linking only parents that require gradients."""
    out = Value(data)
    parents = tuple((p, rule) for p, rule in parent_rules
                    if p.requires_grad or p._parents)
    out._parents = parents
    return out


# -- primitives ----------------------------------------------------------


def add(a, b):
    """Elementwise sum with trailing-axis broadcasting."""
    a, b = asvalue(a), asvalue(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    return _track(data,
                  (a, lambda g: _unbroadcast(g, a.shape)),
                  (b, lambda g: _unbroadcast(g, b.shape)))


def mul(a, b):
    """Elementwise product with trailing-axis broadcasting."""
    a, b = asvalue(a), asvalue(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return _track(data,
                  (a, lambda g: _unbroadcast(g * b.data, a.shape)),
                  (b, lambda g: _unbroadcast(g * a.data, b.shape)))


def matmul(a, b):
    """Matrix product; operands must be at least 2-D (numpy matmul rules)."""
    a, b = asvalue(a), asvalue(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    data = a.data @ b.data

    def da(g):
        return _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)

    def db(g):
        return _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)

    return _track(data, (a, da), (b, db))


def concat(values, axis=-1):
    """Concatenate along `axis`; other dimensions must match exactly."""
    values = [asvalue(v) for v in values]
    try:
        data = np.concatenate([v.data for v in values], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[v.shape for v in values]) from None
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def make_rule(i):
        return lambda g: np.split(g, splits, axis=axis)[i]

    return _track(data, *[(v, make_rule(i)) for i, v in enumerate(values)])


def _is_basic_index(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice, type(None), type(Ellipsis)))
               for p in parts)


def take(a, key):
    """Basic/fancy indexing; gradient scatters back into the input shape."""
    a = asvalue(a)
    data = a.data[key]
    basic = _is_basic_index(key)

    def rule(g):
        out = np.zeros_like(a.data)
        if basic:  # basic indexing never repeats elements
            out[key] += g
        else:
            np.add.at(out, key, g)
        return out

    return _track(np.ascontiguousarray(data), (a, rule))


def reshape(a, shape):
    a = asvalue(a)
    data = a.data.reshape(shape)
    return _track(data, (a, lambda g: g.reshape(a.shape)))


def leaky_relu(a, slope=0.2):
    """max(x, slope*x); the subgradient at 0 is taken as 1."""
    a = asvalue(a)
    data = np.maximum(a.data, slope * a.data)
    mask = a.data >= 0

    def rule(g):
        out = g * slope
        out[mask] = g[mask]
        return out

    return _track(data, (a, rule))


def exp(a):
    a = asvalue(a)
    data = np.exp(a.data)
    return _track(data, (a, lambda g: g * data))


def log(a):
    a = asvalue(a)
    data = np.log(a.data)
    return _track(data, (a, lambda g: g / a.data))


def power(a, exponent):
    a = asvalue(a)
    data = a.data ** exponent
    return _track(data, (a, lambda g: g * exponent * a.data ** (exponent - 1)))


def sigmoid(a):
    """Numerically stable logistic function."""
    a = asvalue(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _track(data, (a, lambda g: g * data * (1.0 - data)))


def softmax(a, axis=-1):
    """Stable softmax; outputs are non-negative and sum to 1 along `axis`."""
    a = asvalue(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return data * (g - (g * data).sum(axis=axis, keepdims=True))

    return _track(data, (a, rule))


def sum_(a, axis=None, keepdims=False):
    a = asvalue(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).copy()

    return _track(data, (a, rule))


def mean(a, axis=None, keepdims=False):
    a = asvalue(a)
    n = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def max_(a, axis):
    """Max over one axis; gradient splits evenly across tied maxima."""
    a = asvalue(a)
    data = a.data.max(axis=axis)

    def rule(g):
        expanded = np.expand_dims(data, axis)
        tie = (a.data == expanded).astype(a.data.dtype)
        tie /= tie.sum(axis=axis, keepdims=True)
        return tie * np.expand_dims(g, axis)

    return _track(data, (a, rule))


# -- fused, numerically stable losses -------------------------------------


def softmax_cross_entropy(logits, labels):
    """Per-row cross-entropy of `logits` (B, C) against integer `labels` (B,)."""
    logits = asvalue(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    picked = logits.data[np.arange(len(labels)), labels]
    data = lse - picked

    def rule(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(labels)), labels] -= 1.0
        return p * g[:, None]

    return _track(data, (logits, rule))


def sigmoid_binary_cross_entropy(logits, targets):
    """Elementwise stable BCE on raw logits against 0/1 `targets`."""
    logits = asvalue(logits)
    targets = np.asarray(targets, dtype=logits.data.dtype)
    if targets.shape != logits.shape:
        raise ShapeError("sigmoid_binary_cross_entropy", logits.shape, targets.shape)
    x = logits.data
    data = np.maximum(x, 0) - x * targets + np.log1p(np.exp(-np.abs(x)))

    def rule(g):
        p = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return g * (p - targets)

    return _track(data, (logits, rule))


def l2_penalty(params, coefficient):
    """0.5 * coefficient * sum of squared entries over all `params`.

    Added to the task loss before backward (the penalty is part of the
    loss, not a decoupled weight decay).
    """
    total = None
    for p in params:
        term = sum_(mul(p, p))
        total = term if total is None else add(total, term)
    return mul(total, 0.5 * float(coefficient))


# -- Adam ------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments plus the hyperparameters that drive each update.

    `l2_coefficient` is carried here for bookkeeping; the penalty itself is
    added to the loss (see `l2_penalty`), never applied inside `adam_step`.
    """

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    l2_coefficient: float = 0.0
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1): {self.beta1}, {self.beta2}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive: {self.epsilon}")


def adam_step(params, state):
    """One bias-corrected Adam update, in place, from accumulated gradients.

    theta -= lr * m_hat / (sqrt(v_hat) + eps).  Parameters with no gradient
    are treated as having a zero gradient.
    """
    if state.first_moment == []:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if len(state.first_moment) != len(params):
        raise ValueError(
            f"adam_step: {len(params)} params vs state of {len(state.first_moment)}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != state.first_moment[i].shape:
            raise ShapeError("adam_step", g.shape, state.first_moment[i].shape)
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


def zero_gradients(params):
    for p in params:
        p.zero_grad()


def check_finite(array, name="array"):
    """Reject NaN/Inf at module boundaries (dataset, checkpoint, service)."""
    if not np.isfinite(array).all():
        raise ValueError(f"{name} contains non-finite entries")
    return array
