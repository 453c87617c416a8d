"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value is a 2-D numpy array (scalars are 1x1). The graph is rebuilt on
every forward pass (define-by-run): each op returns a new Var that remembers
its parents and a closure that pushes the incoming gradient back to them.
Sparse matrices (scipy CSR) only ever appear as constant left operands of
``sparse_dense_matmul``; gradients never flow into them.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, InvalidLabelError


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {a.shape}")
    return np.ascontiguousarray(a)


class Var:
    """A node in the computation graph: value, gradient slot, parent links."""

    __slots__ = ("value", "grad", "parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = _as_matrix(value)
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Var(shape={self.value.shape}, leaf={not self.parents})"


def constant(x) -> Var:
    """A leaf Var; its grad slot exists but nothing reads it."""
    return Var(x)


def _check_same_shape(a: Var, b, opname: str):
    bshape = b.shape
    if a.value.shape != bshape:
        raise DimensionError(f"{opname}: shape {a.value.shape} vs {bshape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast from size 1."""
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _broadcastable(sa, sb):
    return all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb))


def add(a: Var, b: Var) -> Var:
    if not _broadcastable(a.shape, b.shape):
        raise DimensionError(f"add: shape {a.shape} vs {b.shape}")
    out = Var(a.value + b.value, parents=(a, b))

    def bwd(g):
        a.grad += _unbroadcast(g, a.value.shape)
        b.grad += _unbroadcast(g, b.value.shape)

    out._backward = bwd
    return out


def sub(a: Var, b: Var) -> Var:
    if not _broadcastable(a.shape, b.shape):
        raise DimensionError(f"sub: shape {a.shape} vs {b.shape}")
    out = Var(a.value - b.value, parents=(a, b))

    def bwd(g):
        a.grad += _unbroadcast(g, a.value.shape)
        b.grad -= _unbroadcast(g, b.value.shape)

    out._backward = bwd
    return out


def mul(a: Var, b: Var) -> Var:
    """Elementwise product with numpy broadcasting."""
    if not _broadcastable(a.shape, b.shape):
        raise DimensionError(f"mul: shape {a.shape} vs {b.shape}")
    out = Var(a.value * b.value, parents=(a, b))

    def bwd(g):
        a.grad += _unbroadcast(g * b.value, a.value.shape)
        b.grad += _unbroadcast(g * a.value, b.value.shape)

    out._backward = bwd
    return out


def add_const(a: Var, c) -> Var:
    """a + c where c is plain data; gradient flows through a only."""
    c = np.asarray(c, dtype=np.float64)
    out = Var(a.value + c, parents=(a,))

    def bwd(g):
        a.grad += _unbroadcast(g, a.value.shape)

    out._backward = bwd
    return out


def scale(a: Var, s: float) -> Var:
    s = float(s)
    out = Var(a.value * s, parents=(a,))

    def bwd(g):
        a.grad += g * s

    out._backward = bwd
    return out


def square(a: Var) -> Var:
    out = Var(a.value * a.value, parents=(a,))

    def bwd(g):
        a.grad += 2.0 * a.value * g

    out._backward = bwd
    return out


def matmul(a: Var, b: Var) -> Var:
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul: shape {a.value.shape} vs {b.value.shape}")
    out = Var(a.value @ b.value, parents=(a, b))

    def bwd(g):
        a.grad += g @ b.value.T
        b.grad += a.value.T @ g

    out._backward = bwd
    return out


def sparse_dense_matmul(s: sp.csr_matrix, b: Var) -> Var:
    """s @ b with s a constant CSR matrix; gradient flows to b only."""
    if s.shape[1] != b.value.shape[0]:
        raise DimensionError(f"sparse_dense_matmul: shape {s.shape} vs {b.value.shape}")
    out = Var(np.asarray(s @ b.value), parents=(b,))

    def bwd(g):
        b.grad += np.asarray(s.T @ g)

    out._backward = bwd
    return out


def elementwise(v: Var, kind: str) -> Var:
    if kind == "tanh":
        y = np.tanh(v.value)
        dy = 1.0 - y * y
    elif kind == "relu":
        y = np.maximum(v.value, 0.0)
        dy = (v.value > 0.0).astype(np.float64)
    elif kind == "sigmoid":
        y = 0.5 * (1.0 + np.tanh(0.5 * v.value))
        dy = y * (1.0 - y)
    else:
        raise ValueError(f"unknown elementwise kind: {kind!r}")
    out = Var(y, parents=(v,))

    def bwd(g):
        v.grad += g * dy

    out._backward = bwd
    return out


def tanh(v: Var) -> Var:
    return elementwise(v, "tanh")


def relu(v: Var) -> Var:
    return elementwise(v, "relu")


def sigmoid(v: Var) -> Var:
    return elementwise(v, "sigmoid")


def row_softmax(v: Var) -> Var:
    """Row-wise softmax with max subtraction for overflow safety."""
    shifted = v.value - v.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Var(y, parents=(v,))

    def bwd(g):
        v.grad += y * (g - (g * y).sum(axis=1, keepdims=True))

    out._backward = bwd
    return out


def concat_cols(a: Var, b: Var) -> Var:
    if a.value.shape[0] != b.value.shape[0]:
        raise DimensionError(f"concat_cols: shape {a.value.shape} vs {b.value.shape}")
    out = Var(np.hstack([a.value, b.value]), parents=(a, b))
    ka = a.value.shape[1]

    def bwd(g):
        a.grad += g[:, :ka]
        b.grad += g[:, ka:]

    out._backward = bwd
    return out


def take_cols(v: Var, start: int, stop: int) -> Var:
    out = Var(v.value[:, start:stop].copy(), parents=(v,))

    def bwd(g):
        v.grad[:, start:stop] += g

    out._backward = bwd
    return out


def sum_all(v: Var) -> Var:
    out = Var(np.array([[v.value.sum()]]), parents=(v,))

    def bwd(g):
        v.grad += g[0, 0]

    out._backward = bwd
    return out


def mse(pred: Var, target) -> Var:
    """Mean over all entries of the squared difference; target is plain data."""
    target = np.asarray(target, dtype=np.float64)
    if pred.value.shape != target.shape:
        raise DimensionError(f"mse: shape {pred.value.shape} vs {target.shape}")
    diff = pred.value - target
    n = diff.size
    out = Var(np.array([[float((diff * diff).sum()) / n]]), parents=(pred,))

    def bwd(g):
        pred.grad += (2.0 / n) * diff * g[0, 0]

    out._backward = bwd
    return out


def ce_with_logits(logits: Var, labels) -> Var:
    """Mean softmax cross-entropy, computed via log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if logits.value.shape[0] != labels.shape[0]:
        raise DimensionError(
            f"ce_with_logits: {logits.value.shape[0]} rows vs {labels.shape[0]} labels"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.value.shape[1]):
        raise InvalidLabelError(f"labels must lie in [0, {logits.value.shape[1]})")
    z = logits.value
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    n = labels.shape[0]
    nll = lse - z[np.arange(n), labels]
    out = Var(np.array([[nll.mean()]]), parents=(logits,))
    probs = np.exp(z - lse[:, None])

    def bwd(g):
        delta = probs.copy()
        delta[np.arange(n), labels] -= 1.0
        logits.grad += (g[0, 0] / n) * delta

    out._backward = bwd
    return out


def backward(loss: Var):
    """Populate .grad of everything reachable from a scalar loss.

    Gradients accumulate across calls; zero leaf grads between steps.
    """
    if loss.value.shape != (1, 1):
        raise DimensionError(f"backward: loss must be scalar, got {loss.value.shape}")
    topo: list[Var] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones((1, 1))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


class Adam:
    """Adam with an additive weight-decay term folded into the gradient.

    Decay is applied to tensors whose name is not listed in ``no_decay``
    (bias vectors are exempt). One shared step counter, per-tensor moments.
    """

    def __init__(self, params, lr=0.001, weight_decay=0.0005,
                 beta1=0.9, beta2=0.999, eps=1e-8, no_decay=()):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.no_decay = frozenset(no_decay)
        self.t = 0
        self.m = {k: np.zeros_like(v.value) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.value) for k, v in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            if self.weight_decay and name not in self.no_decay:
                g = g + self.weight_decay * p.value
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / (1.0 - b1 ** self.t)
            vhat = v / (1.0 - b2 ** self.t)
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
