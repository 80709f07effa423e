"""Reverse-mode automatic differentiation on numpy arrays.

Every op records a vector-Jacobian product written in terms of other
``Tensor`` ops, so running :func:`grad` with ``create_graph=True`` builds a
differentiable graph of the gradient itself. That is what lets an SGD step be
unrolled and differentiated end to end.
"""
from __future__ import annotations

import contextlib

import numpy as np

from ..errors import ContractError

_GRAD_ENABLED = True
_DTYPE = np.float32


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def set_grad_enabled(flag: bool):
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, bool(flag)
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def no_grad():
    return set_grad_enabled(False)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A node in the computation graph: a value plus how to pull gradients back."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "op", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, op="leaf"):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjp, op):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, vjp, op)
    return Tensor(data, False, (), None, op)


# shape plumbing

def sum_to(x, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    data = data.reshape(shape)
    src_shape = x.shape
    return _node(data, (x,), lambda g: (broadcast_to(g, src_shape),), "sum_to")


def broadcast_to(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src_shape = x.shape
    data = np.broadcast_to(x.data, shape)
    return _node(data, (x,), lambda g: (sum_to(g, src_shape),), "broadcast_to")


def reshape(x, shape):
    x = as_tensor(x)
    src_shape = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (reshape(g, src_shape),), "reshape")


def transpose(x):
    x = as_tensor(x)
    return _node(x.data.T, (x,), lambda g: (transpose(g),), "transpose")


def getitem(x, idx):
    x = as_tensor(x)
    src_shape = x.shape
    return _node(x.data[idx], (x,), lambda g: (scatter(g, idx, src_shape),), "getitem")


def scatter(x, idx, shape):
    """Place ``x`` at ``idx`` inside a zero array of ``shape`` (adjoint of indexing)."""
    x = as_tensor(x)
    data = np.zeros(shape, dtype=x.data.dtype)
    if _is_fancy(idx):
        np.add.at(data, idx, x.data)
    else:
        data[idx] = x.data
    return _node(data, (x,), lambda g: (getitem(g, idx),), "scatter")


def _is_fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def concat(xs, axis=0):
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)
    ndim = xs[0].ndim
    ax = axis % ndim

    def vjp(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * ndim
            sl[ax] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(sl)))
        return tuple(out)

    return _node(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), vjp, "concat")


# elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(neg(g), sb)), "sub")


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.data * b.data, (a, b), lambda g: (sum_to(mul(g, b), sa), sum_to(mul(g, a), sb)), "mul"
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        ga = div(g, b)
        return sum_to(ga, sa), sum_to(neg(mul(ga, div(a, b))), sb)

    return _node(a.data / b.data, (a, b), vjp, "div")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data @ b.data,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
        "matmul",
    )


def power(x, p):
    """``x ** p`` for a constant scalar exponent."""
    x = as_tensor(x)
    p = float(p)
    return _node(x.data ** p, (x,), lambda g: (mul(g, mul(p, power(x, p - 1.0))),), "pow")


def exp(x):
    x = as_tensor(x)
    out = _node(np.exp(x.data), (x,), None, "exp")
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, out),)
    return out


def log(x):
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (div(g, x),), "log")


def sqrt(x):
    x = as_tensor(x)
    out = _node(np.sqrt(x.data), (x,), None, "sqrt")
    if out.requires_grad:
        out._vjp = lambda g: (div(g, mul(2.0, out)),)
    return out


def relu(x):
    x = as_tensor(x)
    return _node(np.maximum(x.data, 0), (x,), lambda g: (mul(g, Tensor(x.data > 0)),), "relu")


def sigmoid(x):
    x = as_tensor(x)
    # split by sign so large |x| never overflows exp
    d = x.data
    e = np.exp(-np.abs(d))
    data = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    out = _node(data, (x,), None, "sigmoid")
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def tanh(x):
    x = as_tensor(x)
    out = _node(np.tanh(x.data), (x,), None, "tanh")
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, sub(1.0, mul(out, out))),)
    return out


# reductions

def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    src_shape = x.shape
    data = x.data.sum(axis=axis, keepdims=keepdims)
    if axis is None or keepdims:
        kept = (1,) * len(src_shape) if axis is None else data.shape
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(src_shape) for a in axes)
        kept = tuple(1 if i in axes else s for i, s in enumerate(src_shape))

    def vjp(g):
        return (broadcast_to(reshape(g, kept), src_shape),)

    return _node(data, (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def logsumexp(x, axis=-1, keepdims=True):
    x = as_tensor(x)
    m = Tensor(np.max(x.data, axis=axis, keepdims=True))
    out = add(log(tsum(exp(sub(x, m)), axis=axis, keepdims=True)), m)
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out


def log_softmax(x, axis=-1):
    """Max-shifted log-softmax with a closed-form backward."""
    x = as_tensor(x)
    d = x.data
    shifted = d - d.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = _node(data, (x,), None, "log_softmax")
    if out.requires_grad:
        out._vjp = lambda g: (sub(g, mul(exp(out), tsum(g, axis=axis, keepdims=True))),)
    return out


def softmax(x, axis=-1):
    return exp(log_softmax(x, axis))


def cross_entropy(logits, targets):
    """Mean cross-entropy; ``targets`` is a probability matrix or integer labels."""
    logits = as_tensor(logits)
    logp = log_softmax(logits, axis=1)
    if not isinstance(targets, Tensor):
        targets = np.asarray(targets)
        if targets.ndim == 1:
            onehot = np.zeros(logits.shape, dtype=_DTYPE)
            onehot[np.arange(len(targets)), targets.astype(int)] = 1.0
            targets = onehot
        targets = Tensor(targets)
    return neg(mean(tsum(mul(targets, logp), axis=1)))


# differentiation

def _topo(root, stop):
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
        if id(node) in stop:
            continue
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output, inputs, grad_output=None, create_graph=False):
    """Gradients of scalar ``output`` with respect to each tensor in ``inputs``.

    Propagation stops at the requested inputs, so a non-leaf input (for
    example the weights after k unrolled SGD steps) receives only the
    gradient flowing into it from ``output``. Inputs that ``output`` does not
    depend on receive zeros.
    """
    output = as_tensor(output)
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if grad_output is None and output.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {output.shape}")
    zeros = [Tensor(np.zeros_like(x.data)) for x in inputs]
    if not output.requires_grad:
        return zeros[0] if single else zeros

    stop = {id(x) for x in inputs}
    seed = grad_output if grad_output is not None else np.ones_like(output.data)
    grads = {id(output): as_tensor(seed)}
    with set_grad_enabled(create_graph):
        for node in reversed(_topo(output, stop)):
            if id(node) in stop:
                continue
            g = grads.pop(id(node), None)
            if g is None or node._vjp is None:
                continue
            for p, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    out = [grads.get(id(x), z) for x, z in zip(inputs, zeros)]
    if not create_graph:
        out = [Tensor(g.data) for g in out]
    return out[0] if single else out
