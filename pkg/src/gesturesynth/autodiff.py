"""Dense float64 tensors with reverse-mode automatic differentiation.

Every model layer, loss, and sampler in this package is built on the ops
here, so each analytic gradient can be cross-checked against central finite
differences (see gradcheck). Ops record their operands and a backward rule
on the output tensor; ``Tensor.backward`` walks that implicit graph once in
reverse topological order. The data buffer of a tensor is treated as
immutable once an op has consumed it.
"""

import numpy as np

from .errors import DimensionError

__all__ = [
    "Tensor",
    "as_tensor",
    "concat",
    "softmax",
    "layer_norm",
    "scaled_dot_attention",
    "gelu",
    "take_rows",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # -- graph walk ---------------------------------------------------------

    def _toposort(self):
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        return order

    def backward(self, grad=None):
        """Accumulate dL/dp into `.grad` of every upstream tensor."""
        if not self.requires_grad:
            raise ValueError("backward() called on a tensor that does not require grad")
        if grad is None:
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(self._toposort()):
            if node._backward is None or node.grad is None:
                continue
            gs = node._backward(node.grad)
            for parent, g in zip(node._parents, gs):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)

        def back(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))

        return _node(self.data + other.data, (self, other), back)

    __radd__ = __add__

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = as_tensor(other)

        def back(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape))

        return _node(self.data - other.data, (self, other), back)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def back(g):
            return (_unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape))

        return _node(a * b, (self, other), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def back(g):
            return (
                _unbroadcast(g / b, self.shape),
                _unbroadcast(-g * a / (b * b), other.shape),
            )

        return _node(a / b, (self, other), back)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self.data

        def back(g):
            return (g * exponent * a ** (exponent - 1),)

        return _node(a**exponent, (self,), back)

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

        def back(g):
            ga = _unbroadcast(g @ b.swapaxes(-1, -2), self.shape)
            gb = _unbroadcast(a.swapaxes(-1, -2) @ g, other.shape)
            return (ga, gb)

        return _node(a @ b, (self, other), back)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _node(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),)
        )

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return _node(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),)
        )

    def swap_last(self):
        return _node(
            self.data.swapaxes(-1, -2), (self,), lambda g: (g.swapaxes(-1, -2),)
        )

    def __getitem__(self, key):
        out = self.data[key]
        shape = self.shape

        def back(g):
            full = np.zeros(shape, dtype=np.float64)
            full[key] = g
            return (full,)

        return _node(out, (self,), back)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def back(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            g2 = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g2, shape).copy(),)

        return _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.size
        elif isinstance(axis, tuple):
            count = int(np.prod([self.shape[a] for a in axis]))
        else:
            count = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- pointwise nonlinearities -------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return _node(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        return _node(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return _node(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self):
        out = np.tanh(self.data)
        return _node(out, (self,), lambda g: (g * (1.0 - out * out),))


def _node(data, parents, back):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = back
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back
    )


def softmax(x) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _node(y, (x,), back)


def layer_norm(x, gain, bias, eps=1e-8) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply affine.

    The epsilon keeps a zero-variance row finite (it maps to `bias`).
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gain + bias


def scaled_dot_attention(q, k, v, scale) -> Tensor:
    """softmax(q @ k^T * scale) @ v over the last two axes."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query/key dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key/value token counts differ: {k.shape} vs {v.shape}")
    scores = (q @ k.swap_last()) * scale
    return softmax(scores) @ v


def gelu(x) -> Tensor:
    """Smooth gated activation (tanh formulation)."""
    x = as_tensor(x)
    a = x.data
    c = np.sqrt(2.0 / np.pi)
    u = c * (a + 0.044715 * a**3)
    t = np.tanh(u)
    out = 0.5 * a * (1.0 + t)

    def back(g):
        du = c * (1.0 + 3 * 0.044715 * a * a)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du),)

    return _node(out, (x,), back)


def take_rows(table, indices) -> Tensor:
    """Row lookup into an embedding table; gradients scatter-add back."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    shape = table.shape

    def back(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, idx, g)
        return (full,)

    return _node(table.data[idx], (table,), back)
