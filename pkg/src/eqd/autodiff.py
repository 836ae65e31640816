"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable op on a tensor that requires gradients records a node
stamped with a global sequence number.  Those stamps form the tape:
:func:`backward` collects the nodes reachable from the loss and replays them
in strictly decreasing sequence order, then releases them.  A graph can be
differentiated once; a second call raises :class:`GraphConsumed`.

Recording is per thread (see :func:`no_grad`), so independent graphs may be
built on independent threads.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import GraphConsumed, IndexOutOfRange, NonFiniteValue, ShapeMismatch

_seq = itertools.count()
_local = threading.local()
_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class _Node:
    __slots__ = ("seq", "inputs", "backward", "consumed")

    def __init__(self, inputs, backward):
        self.seq = next(_seq)
        self.inputs = inputs
        self.backward = backward
        self.consumed = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "trainable", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None or arr.dtype.kind != "f" or arr.dtype.type is not _default_dtype:
            arr = arr.astype(dtype or _default_dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.trainable = requires_grad
        self.name = name
        self._node: _Node | None = None

    # -- basic properties
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul_elem(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, opname: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteValue(f"{opname} produced non-finite values")


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward, opname: str) -> Tensor:
    _check_finite(data, opname)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.trainable = False
    out._node = None
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(inputs, backward)
    else:
        out.requires_grad = False
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{opname}: shapes {a.shape} and {b.shape} are incompatible") from None


# ------------------------------------------------------------------ arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), back, "sub")


def mul_elem(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul_elem")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), back, "mul_elem")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast as in ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), back, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tensors, back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"stack: {exc}") from None

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, back, "stack")


def slice_(a: Tensor, index) -> Tensor:
    out = a.data[index]
    basic = _is_basic_index(index)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), back, "slice")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / float(n))


# ------------------------------------------------------------------ elementwise


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


# ------------------------------------------------------------------ normalisation / losses


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), back, "log_softmax")


def cross_entropy_from_logits(logits: Tensor, targets, weights=None) -> Tensor:
    """Summed negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` has shape (..., V) and ``targets`` the leading shape.  Optional
    ``weights`` (same shape as targets) masks or reweights positions.
    """
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeMismatch(f"targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexOutOfRange(f"target index outside [0, {V})")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=-1, keepdims=True)
    logp = shifted - np.log(z)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum()
    soft = e / z

    def back(g):
        grad = soft.copy()
        np.put_along_axis(
            grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1
        )
        return (grad * (w * g)[..., None],)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), back, "cross_entropy")


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise ShapeMismatch(f"mse: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = float(diff.size)
    return _make(np.asarray((diff * diff).sum() / n), (pred,), lambda g: (2.0 * g * diff / n,), "mse")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def back(g):
        gg = _unbroadcast(g * xhat, gamma.shape)
        gb = _unbroadcast(g, beta.shape)
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv / d * (d * gh - gh.sum(-1, keepdims=True) - xhat * (gh * xhat).sum(-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), back, "layer_norm")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexOutOfRange(f"embedding id outside [0, {table.shape[0]})")

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), back, "embedding")


# ------------------------------------------------------------------ backward


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns gradients for every leaf tensor with ``requires_grad`` reachable
    from the loss, and accumulates them into ``leaf.grad``.
    """
    if loss.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
            return {loss: g}
        return {}

    nodes: dict[int, tuple[_Node, Tensor]] = {}
    stack = [loss]
    seen: set[int] = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        node = t._node
        if node is None:
            continue
        if node.consumed:
            raise GraphConsumed("this graph has already been differentiated")
        nodes[node.seq] = (node, t)
        stack.extend(i for i in node.inputs if i.requires_grad)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for seq in sorted(nodes, reverse=True):
        node, out = nodes[seq]
        g = grads.pop(id(out), None)
        node.consumed = True
        backfn, inputs = node.backward, node.inputs
        node.backward = None
        node.inputs = ()
        if g is None:
            continue
        in_grads = backfn(g)
        for inp, ig in zip(inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + ig if key in grads else ig
            if inp._node is None:
                leaves[key] = inp

    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


# ------------------------------------------------------------------ optimisers


def clip_grad_norm(grads: Mapping[Tensor, np.ndarray], max_norm: float) -> tuple[dict, float]:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        f = max_norm / (total + 1e-12)
        return {p: g * f for p, g in grads.items()}, total
    return dict(grads), total


def sgd_step(params: Iterable[Tensor], grads: Mapping[Tensor, np.ndarray], lr: float) -> None:
    for p in params:
        g = grads.get(p)
        if g is None or not p.trainable:
            continue
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient {g.shape} vs parameter {p.shape}")
        p.data -= lr * g


class AdamW:
    """AdamW with bias correction and decoupled weight decay.

    Parameters whose ``trainable`` flag is False are never touched.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            if not p.trainable:
                continue
            g = grads.get(p)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient {g.shape} vs parameter {p.shape}")
            key = id(p)
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(p.data)
                self.v[key] = np.zeros_like(p.data)
            v = self.v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
