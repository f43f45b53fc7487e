"""Dense tensors with tape-free reverse-mode differentiation.

Every op returns a new :class:`Tensor` holding its parents and a closure that
maps the output gradient to parent gradients. ``backward`` walks the implicit
graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

from . import backend


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *dims):
        self.op = op
        self.dims = dims
        super().__init__(f"{op}: incompatible shapes {', '.join(str(tuple(d)) for d in dims)}")


_replay: contextvars.ContextVar = contextvars.ContextVar("imageome_sg_replay", default=None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf needing it."""
        if self.data.shape != () and self.data.size != 1:
            raise ShapeError("backward (loss must be scalar)", self.shape)
        order = _topo(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topo(root: Tensor) -> list:
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
        for p in node._parents:
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    for p in parents:
        if p.requires_grad or p._backward is not None:
            return Tensor(data, _parents=parents, _backward=backward_fn)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(op, fn, a, b):
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def grad(loss: Tensor, params: Sequence[Tensor]) -> list:
    """Gradients of scalar ``loss`` w.r.t. ``params`` (zeros where unreachable)."""
    for p in params:
        p.grad = None
    loss.backward()
    out = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.grad = None
    return out


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(_binary("add", np.add, a, b), (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(_binary("sub", np.subtract, a, b), (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(_binary("mul", np.multiply, a, b), (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary("div", np.divide, a, b)
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def absolute(a) -> Tensor:
    """|a| with subgradient 0 at 0."""
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, slope * a.data), (a,),
                 lambda g: (np.where(pos, g, slope * g),))


# reductions / shape ------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def index(a, key) -> Tensor:
    """Basic slicing / integer-array row gather, with scatter-add backward."""
    a = as_tensor(a)
    try:
        out = a.data[key]
    except IndexError:
        raise ShapeError("slice", a.shape) from None

    fancy = any(isinstance(k, (np.ndarray, list)) for k in (key if isinstance(key, tuple) else (key,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)
    return _make(np.array(out, copy=True), (a,), bw)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = [t.shape for t in ts]
    nd = len(shapes[0])
    ax = axis % nd
    for s in shapes[1:]:
        if len(s) != nd or any(s[i] != shapes[0][i] for i in range(nd) if i != ax):
            raise ShapeError("concat", *shapes)
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [s[ax] for s in shapes])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(ts)))
    return _make(out, tuple(ts), bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


# linear algebra ----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, w, b) -> Tensor:
    """x @ w + b for x: [n, i], w: [i, o], b: [o]."""
    return add(matmul(x, w), b)


def conv2d(x, w) -> Tensor:
    """Stride-1 convolution with symmetric zero padding ('same').

    x: [N, H, W, C_in]; w: [k, k, C_in, C_out] with odd k.
    """
    x, w = as_tensor(x), as_tensor(w)
    if (x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1]
            or w.shape[0] % 2 != 1 or x.shape[3] != w.shape[2]):
        raise ShapeError("conv2d", x.shape, w.shape)
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data)
    out = backend.kernels.conv2d_forward(xd, wd)

    def bw(g):
        gx, gw = backend.kernels.conv2d_backward(xd, wd, np.ascontiguousarray(g))
        return gx, gw
    return _make(out, (x, w), bw)


# probabilistic -------------------------------------------------------------------

def log_softmax(a) -> Tensor:
    """Row-wise log-softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (a,), lambda g: (g - sm * g.sum(axis=-1, keepdims=True),))


def softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` [n, K]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"cross_entropy: label out of range [0, {logits.shape[1]})")
    lp = log_softmax(logits)
    picked = index(lp, (np.arange(labels.size), labels))
    return mean(picked) * -1.0


def mean_abs_error(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mean_abs_error", a.shape, b.shape)
    return mean(absolute(sub(a, b)))


# gradient routing ------------------------------------------------------------------

def stop_gradient(a) -> Tensor:
    """Value of ``a`` with no gradient path.

    Under :func:`replay_stop_gradients` the value is taken from a recorded tape
    instead, which turns stop-gradient graphs into ordinary functions for
    finite-difference checks.
    """
    a = as_tensor(a)
    tape = _replay.get()
    if tape is not None:
        return Tensor(tape.stop_value(a.data))
    return Tensor(a.data.copy())


def straight_through(z, zq) -> Tensor:
    """Forward value ``zq``; backward passes the gradient to ``z`` unchanged.

    Outside a replay the value is a bitwise copy of ``zq``. Under
    :func:`replay_stop_gradients` it is ``z + sg(zq - z)`` with the offset
    taken from the tape, so finite differences see the surrogate's slope.
    """
    z, zq = as_tensor(z), as_tensor(zq)
    if z.shape != zq.shape:
        raise ShapeError("straight_through", z.shape, zq.shape)
    if _replay.get() is not None:
        return add(z, stop_gradient(sub(zq, z)))
    return _make(zq.data.copy(), (z,), lambda g: (g,))


class StopGradientTape:
    """Recorded stop-gradient values and discrete choices from one forward pass."""

    def __init__(self):
        self.values: list = []
        self.choices: list = []
        self.recording = True
        self._vi = 0
        self._ci = 0

    def stop_value(self, value):
        if self.recording:
            self.values.append(value.copy())
            return value.copy()
        v = self.values[self._vi]
        self._vi += 1
        return v

    def choice(self, value):
        if self.recording:
            self.choices.append(value.copy())
            return value
        v = self.choices[self._ci]
        self._ci += 1
        return v

    def rewind(self):
        self.recording = False
        self._vi = self._ci = 0


@contextlib.contextmanager
def replay_stop_gradients(tape: StopGradientTape):
    token = _replay.set(tape)
    try:
        yield tape
    finally:
        _replay.reset(token)


def discrete_choice(value: np.ndarray) -> np.ndarray:
    """Pass-through for argmin/argmax results; frozen under replay."""
    tape = _replay.get()
    return value if tape is None else tape.choice(value)
