"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the primitives needed by the denoiser and the unlearning losses exist:
flat-vector views, affine maps, SiLU, concatenation, add/sub/scale, squared
norms and weighted sums. Arrays are either 1-D (parameter vectors) or 2-D
with samples along axis 0; there is no general broadcasting.

Batched rows are reduced with a single matmul/sum per primitive, so the
gradient of a batch loss is a deterministic function of its inputs.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class GraphError(ValueError):
    pass


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn")
    # numpy ufuncs on nodes would silently build object arrays; refuse them
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, c):
        if isinstance(c, Node):
            raise GraphError("node-by-node products are not a supported primitive")
        return scale(self, c)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Node(shape={self.value.shape})"


def as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=np.float64))


def _acc(node: Node, g):
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad += g


# -- primitives ------------------------------------------------------------

def view(flat: Node, start: int, shape: tuple) -> Node:
    """Reshaped slice ``flat[start:start+size]``."""
    size = int(np.prod(shape))
    out = Node(flat.value[start:start + size].reshape(shape), (flat,))

    def backward(g):
        if flat.grad is None:
            flat.grad = np.zeros_like(flat.value)
        flat.grad[start:start + size] += g.reshape(-1)

    out.backward_fn = backward
    return out


def affine(x, W: Node, b: Node) -> Node:
    """``x @ W + b`` for x of shape (n, k), W (k, m), b (m,)."""
    x = as_node(x)
    if x.value.ndim != 2 or x.value.shape[1] != W.value.shape[0]:
        raise GraphError(f"affine: input {x.value.shape} does not match weight {W.value.shape}")
    out = Node(x.value @ W.value + b.value, (x, W, b))

    def backward(g):
        _acc(W, x.value.T @ g)
        _acc(b, g.sum(axis=0))
        _acc(x, g @ W.value.T)

    out.backward_fn = backward
    return out


def sigmoid(v: np.ndarray) -> np.ndarray:
    """Logistic function without overflow for large |v|."""
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(x: Node) -> Node:
    s = sigmoid(x.value)
    out = Node(x.value * s, (x,))

    def backward(g):
        _acc(x, g * (s * (1.0 + x.value * (1.0 - s))))

    out.backward_fn = backward
    return out


def concat(a, b) -> Node:
    """Concatenate along the last axis."""
    a, b = as_node(a), as_node(b)
    k = a.value.shape[-1]
    out = Node(np.concatenate([a.value, b.value], axis=-1), (a, b))

    def backward(g):
        _acc(a, g[..., :k])
        _acc(b, g[..., k:])

    out.backward_fn = backward
    return out


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.shape != b.value.shape and a.value.size != 1 and b.value.size != 1:
        raise GraphError(f"add: shape mismatch {a.value.shape} vs {b.value.shape}")
    out = Node(a.value + b.value, (a, b))

    def backward(g):
        _acc(a, g if a.value.shape == g.shape else np.sum(g).reshape(a.value.shape))
        _acc(b, g if b.value.shape == g.shape else np.sum(g).reshape(b.value.shape))

    out.backward_fn = backward
    return out


def sub(a, b) -> Node:
    return add(a, scale(b, -1.0))


def scale(a, c) -> Node:
    """Multiply by a constant: a scalar, an array of a's shape, or a per-row column."""
    a = as_node(a)
    c = np.asarray(c, dtype=np.float64)
    if c.ndim and c.shape != a.value.shape and c.shape != (a.value.shape[0], 1):
        raise GraphError(f"scale: constant shape {c.shape} incompatible with {a.value.shape}")
    out = Node(a.value * c, (a,))
    out.backward_fn = lambda g: _acc(a, g * c)
    return out


def square(a) -> Node:
    a = as_node(a)
    out = Node(a.value * a.value, (a,))
    out.backward_fn = lambda g: _acc(a, 2.0 * a.value * g)
    return out


def row_sq_norm(a) -> Node:
    """Squared Euclidean norm of each row of a 2-D node -> shape (n,)."""
    a = as_node(a)
    out = Node(np.einsum("ij,ij->i", a.value, a.value), (a,))
    out.backward_fn = lambda g: _acc(a, 2.0 * a.value * g[:, None])
    return out


def total(a) -> Node:
    a = as_node(a)
    out = Node(np.asarray(a.value.sum()), (a,))
    out.backward_fn = lambda g: _acc(a, np.full_like(a.value, float(g)))
    return out


def mean(a) -> Node:
    a = as_node(a)
    return scale(total(a), 1.0 / a.value.size)


def weighted_sum(v, w) -> Node:
    """``sum_i w[i] * v[i]`` with constant weights ``w``."""
    v = as_node(v)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != v.value.shape:
        raise GraphError(f"weighted_sum: weights {w.shape} vs values {v.value.shape}")
    out = Node(np.asarray(np.dot(w.ravel(), v.value.ravel())), (v,))
    out.backward_fn = lambda g: _acc(v, float(g) * w)
    return out


def squared_error(a, b) -> Node:
    return total(square(sub(a, b)))


# -- driver ------------------------------------------------------------------

def _toposort(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    if root.value.size != 1:
        raise GraphError(f"loss must be scalar, got shape {root.value.shape}")
    root.grad = np.ones_like(root.value)
    for node in reversed(_toposort(root)):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def value_and_grad(loss_fn: Callable[[Node], Node], params: np.ndarray) -> tuple[float, np.ndarray]:
    """Evaluate ``loss_fn`` at ``params`` and return (loss, d loss / d params).

    ``params`` is copied, never mutated.
    """
    leaf = Node(np.array(params, dtype=np.float64, copy=True))
    out = loss_fn(leaf)
    if not isinstance(out, Node):
        out = as_node(out)
    backward(out)
    g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    return float(out.value), g


def evaluate(loss_fn: Callable[[Node], Node], params: np.ndarray) -> float:
    out = loss_fn(Node(np.array(params, dtype=np.float64, copy=True)))
    return float(as_node(out).value)
