"""Dense reverse-mode autodiff on top of numpy.

A ``Node`` wraps an immutable ``numpy.ndarray`` value. Every operation
below records its parents and a closure that maps the output gradient
to input gradients; ``backward`` replays the tape in reverse
topological order. The graph is rebuilt on every forward pass.

Only the operations the tracking model needs are provided. Broadcasting
follows numpy rules and gradients are reduced back to each input shape.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class OracleError(RuntimeError):
    pass


class Node:
    __slots__ = ("value", "grad", "parents", "op", "_backward", "trainable", "requires_grad")

    def __init__(self, value, parents=(), op="leaf", backward=None, trainable=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.op = op
        self._backward = backward
        self.trainable = trainable
        self.requires_grad = trainable or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def parameter(value, dtype=None):
    """Trainable leaf."""
    return Node(np.array(value, dtype=dtype or np.asarray(value).dtype), trainable=True)


def constant(value, dtype=None):
    return Node(np.asarray(value, dtype=dtype))


def _as_node(x, like=None):
    if isinstance(x, Node):
        return x
    dtype = like.value.dtype if like is not None else None
    return Node(np.asarray(x, dtype=dtype))


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _as_node(a, b if isinstance(b, Node) else None), _as_node(b, a if isinstance(a, Node) else None)
    _broadcast_shape(a.value, b.value, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Node(a.value + b.value, (a, b), "add", backward)


def subtract(a, b):
    a, b = _as_node(a, b if isinstance(b, Node) else None), _as_node(b, a if isinstance(a, Node) else None)
    _broadcast_shape(a.value, b.value, "subtract")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Node(a.value - b.value, (a, b), "subtract", backward)


def multiply(a, b):
    a, b = _as_node(a, b if isinstance(b, Node) else None), _as_node(b, a if isinstance(a, Node) else None)
    _broadcast_shape(a.value, b.value, "multiply")

    def backward(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return Node(a.value * b.value, (a, b), "multiply", backward)


def scale(a, c):
    """Multiply by a python scalar."""

    def backward(g):
        return (g * c,)

    return Node(a.value * a.value.dtype.type(c), (a,), "scale", backward)


def relu(a):
    keep = a.value > 0

    def backward(g):
        return (g * keep,)

    return Node(np.where(keep, a.value, 0).astype(a.value.dtype), (a,), "relu", backward)


def log(a):
    if np.any(a.value <= 0):
        raise FloatingPointError("log of non-positive value")

    def backward(g):
        return (g / a.value,)

    return Node(np.log(a.value), (a,), "log", backward)


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    inside = (a.value >= lo) & (a.value <= hi)

    def backward(g):
        return (g * inside,)

    return Node(np.clip(a.value, lo, hi), (a,), "clip", backward)


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Node(np.asarray(a.value.sum(axis=axis, keepdims=keepdims)), (a,), "sum", backward)


def mean(a, axis=None, keepdims=False):
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape):
    def backward(g):
        return (g.reshape(a.shape),)

    return Node(a.value.reshape(shape), (a,), "reshape", backward)


def transpose(a, axes):
    inverse = np.argsort(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return Node(a.value.transpose(axes), (a,), "transpose", backward)


def concat(nodes, axis=-1):
    nodes = list(nodes)
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[n.shape for n in nodes]}") from None
    return Node(value, tuple(nodes), "concat", backward)


def take(a, index, axis=0):
    """Gather along ``axis``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.value)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (out,)

    return Node(np.take(a.value, index, axis=axis), (a,), "take", backward)


def getitem(a, key):
    def backward(g):
        out = np.zeros_like(a.value)
        np.add.at(out, key, g)
        return (out,)

    return Node(a.value[key], (a,), "getitem", backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Node(a.value @ b.value, (a, b), "matmul", backward)


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def softmax(a, axis=-1):
    """Softmax over ``axis`` with max subtraction."""
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Node(y, (a,), "softmax", backward)


def softmax_rows(a):
    return softmax(a, axis=-1)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs at least two features")
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gg = _unbroadcast(g * xhat, gamma.shape)
        gb = _unbroadcast(g, beta.shape)
        gx_hat = g * gamma.value
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return Node(xhat * gamma.value + beta.value, (x, gamma, beta), "layer_norm", backward)


# ---------------------------------------------------------------- backward pass


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every node reachable from scalar ``loss``."""
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=parent.value.dtype)
            else:
                parent.grad = parent.grad + g
    for node in order:
        if node.trainable and node.grad is None:
            node.grad = np.zeros_like(node.value)


def finite_difference_check(f, params, h=1e-5):
    """Largest relative error between analytic and central-difference gradients.

    ``f`` maps a dict of nodes to a scalar node. ``params`` holds float64
    arrays; they are perturbed in place and restored. The relative error
    uses ``max(|analytic|, |numeric|, 1e-8)`` as the denominator.
    """

    def evaluate():
        return f({name: constant(v) for name, v in params.items()}).value.item()

    if evaluate() != evaluate():
        raise OracleError("objective is not deterministic")
    leaves = {name: parameter(v) for name, v in params.items()}
    backward(f(leaves))

    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        grad = leaves[name].grad.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = evaluate()
            flat[k] = old - h
            down = evaluate()
            flat[k] = old
            numeric = (up - down) / (2 * h)
            denom = max(abs(grad[k]), abs(numeric), 1e-8)
            worst = max(worst, abs(grad[k] - numeric) / denom)
    return worst
