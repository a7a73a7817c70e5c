"""Reverse-mode automatic differentiation over dense numpy arrays.

Small tape-based engine: each operation returns a new :class:`Tensor`
holding a closure that propagates the upstream gradient to its parents.
Only the operator set needed by the analyzer/synthesizer networks and
the five training losses is provided.
"""

import numpy as np

__all__ = [
    "Tensor", "add", "sub", "mul", "div", "neg", "pow_const", "matmul",
    "exp", "log", "sqrt", "tanh", "sigmoid", "relu", "leaky_relu",
    "abs_", "square", "sum_", "mean", "reshape", "concat", "pad",
    "stop_gradient",
]


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional value with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(p for p in parents if p.requires_grad)
        self._backward = backward if self._parents else None
        if self._parents:
            self.requires_grad = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def accum_grad(self, g):
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def detach(self):
        """Value-sharing view that blocks gradient flow (stop-gradient)."""
        return Tensor(self.data, requires_grad=False)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without gradient requires a scalar")
            grad = np.ones_like(self.data)
        self.accum_grad(grad)
        for node in reversed(_toposort(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return _getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _toposort(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


# -- elementwise arithmetic ---------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data, parents=(a, b))
    if out._parents:
        def backward(g):
            if a.requires_grad:
                a.accum_grad(g)
            if b.requires_grad:
                b.accum_grad(g)
        out._backward = backward
    return out


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data - b.data, parents=(a, b))
    if out._parents:
        def backward(g):
            if a.requires_grad:
                a.accum_grad(g)
            if b.requires_grad:
                b.accum_grad(-g)
        out._backward = backward
    return out


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data, parents=(a, b))
    if out._parents:
        def backward(g):
            if a.requires_grad:
                a.accum_grad(g * b.data)
            if b.requires_grad:
                b.accum_grad(g * a.data)
        out._backward = backward
    return out


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data / b.data, parents=(a, b))
    if out._parents:
        def backward(g):
            if a.requires_grad:
                a.accum_grad(g / b.data)
            if b.requires_grad:
                b.accum_grad(-g * a.data / (b.data * b.data))
        out._backward = backward
    return out


def neg(a):
    out = Tensor(-a.data, parents=(a,))
    if out._parents:
        out._backward = lambda g: a.accum_grad(-g)
    return out


def pow_const(a, p):
    """a ** p for a constant (non-Tensor) exponent."""
    out = Tensor(a.data ** p, parents=(a,))
    if out._parents:
        out._backward = lambda g: a.accum_grad(g * p * a.data ** (p - 1))
    return out


def matmul(a, b):
    out = Tensor(np.matmul(a.data, b.data), parents=(a, b))
    if out._parents:
        def backward(g):
            if a.requires_grad:
                if b.data.ndim == 1:
                    a.accum_grad(np.multiply.outer(g, b.data) if g.ndim else g * b.data)
                else:
                    a.accum_grad(np.matmul(g, np.swapaxes(b.data, -1, -2)))
            if b.requires_grad:
                if a.data.ndim == 1:
                    b.accum_grad(np.multiply.outer(a.data, g))
                else:
                    b.accum_grad(np.matmul(np.swapaxes(a.data, -1, -2), g))
        out._backward = backward
    return out


# -- elementwise nonlinearities -----------------------------------------

def exp(a):
    y = np.exp(a.data)
    out = Tensor(y, parents=(a,))
    if out._parents:
        out._backward = lambda g: a.accum_grad(g * y)
    return out


def log(a):
    out = Tensor(np.log(a.data), parents=(a,))
    if out._parents:
        out._backward = lambda g: a.accum_grad(g / a.data)
    return out


def sqrt(a):
    y = np.sqrt(a.data)
    out = Tensor(y, parents=(a,))
    if out._parents:
        out._backward = lambda g: a.accum_grad(g * 0.5 / y)
    return out


def tanh(a):
    y = np.tanh(a.data)
    out = Tensor(y, parents=(a,))
    if out._parents:
        out._backward = lambda g: a.accum_grad(g * (1.0 - y * y))
    return out


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y, parents=(a,))
    if out._parents:
        out._backward = lambda g: a.accum_grad(g * y * (1.0 - y))
    return out


def relu(a):
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0), parents=(a,))
    if out._parents:
        out._backward = lambda g: a.accum_grad(g * mask)
    return out


def leaky_relu(a, slope=0.01):
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, slope * a.data), parents=(a,))
    if out._parents:
        out._backward = lambda g: a.accum_grad(g * np.where(mask, 1.0, slope))
    return out


def abs_(a):
    s = np.sign(a.data)
    out = Tensor(np.abs(a.data), parents=(a,))
    if out._parents:
        out._backward = lambda g: a.accum_grad(g * s)
    return out


def square(a):
    out = Tensor(a.data * a.data, parents=(a,))
    if out._parents:
        out._backward = lambda g: a.accum_grad(g * 2.0 * a.data)
    return out


# -- reductions and shape ops -------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,))
    if out._parents:
        out._backward = lambda g: a.accum_grad(
            _expand_reduced(g, a.data.shape, axis, keepdims))
    return out


def mean(a, axis=None, keepdims=False):
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims), parents=(a,))
    if out._parents:
        n = a.data.size / out.data.size
        out._backward = lambda g: a.accum_grad(
            _expand_reduced(g, a.data.shape, axis, keepdims) / n)
    return out


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape), parents=(a,))
    if out._parents:
        out._backward = lambda g: a.accum_grad(g.reshape(a.data.shape))
    return out


def _getitem(a, key):
    out = Tensor(a.data[key], parents=(a,))
    if out._parents:
        def backward(g):
            full = np.zeros_like(a.data)
            full[key] += g
            a.accum_grad(full)
        out._backward = backward
    return out


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 parents=tuple(tensors))
    if out._parents:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def backward(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                if t.requires_grad:
                    t.accum_grad(piece)
        out._backward = backward
    return out


def pad(a, pad_width):
    """Zero-pad; `pad_width` is a numpy-style list of (before, after) pairs."""
    out = Tensor(np.pad(a.data, pad_width), parents=(a,))
    if out._parents:
        slices = tuple(slice(b, b + n) for (b, _), n in zip(pad_width, a.data.shape))
        out._backward = lambda g: a.accum_grad(g[slices])
    return out


def stop_gradient(a):
    return a.detach()
