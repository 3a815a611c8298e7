"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation builds a :class:`Tensor` holding its value,
references to the tensors it was computed from and a local backward rule
mapping the output gradient to one gradient per parent. :func:`backward`
sweeps the graph in reverse creation order, which is a valid topological
order because parents always exist before their children.

Broadcasting is deliberately narrow: binary ops accept equal shapes, a
scalar operand, or a right operand whose shape is a trailing suffix of the
left one (the bias-add case).
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, ParameterError

_ids = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A node in the autodiff graph."""

    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: BackwardFn | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self._grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = None if value is None else np.asarray(value, dtype=np.float64)

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward: BackwardFn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


# ---------------------------------------------------------------------------
# graph traversal


def _ancestors(root: Tensor) -> list[Tensor]:
    seen = {id(root)}
    stack = [root]
    found = []
    while stack:
        node = stack.pop()
        found.append(node)
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    found.sort(key=lambda n: n._id)
    return found


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every gradient-requiring ancestor of ``loss``.

    Gradients add onto whatever is already stored, so calling this twice
    without zeroing doubles every gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _ancestors(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node._grad = g.copy() if node._grad is None else node._grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``f`` rebuilds the scalar loss from the current values of ``params``;
    each coordinate is perturbed in place and restored afterwards. The error
    per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if h <= 0:
        raise ParameterError(f"finite-difference step must be positive, got {h}")
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("objective is not finite at the base point")
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"objective is not finite near coordinate {i} of {p!r}")
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# elementwise binary ops


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.size == 1 and b.ndim <= 1:
        return "scalar_b"
    if a.size == 1 and a.ndim <= 1:
        return "scalar_a"
    if 0 < b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return "trailing_b"
    raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _align(a: Tensor, b: Tensor):
    kind = _broadcast_kind(a, b)
    ad, bd = a.data, b.data
    if kind == "scalar_b":
        bd = bd.reshape(())
    elif kind == "scalar_a":
        ad = ad.reshape(())
    return ad, bd


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = _align(a, b)
    out = ad + bd

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)
    return _node(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = _align(a, b)
    out = ad - bd

    def bw(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)
    return _node(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = _align(a, b)
    out = ad * bd

    def bw(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)
    return _node(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = _align(a, b)
    out = ad / bd

    def bw(g):
        return _reduce_to(g / bd, a.shape), _reduce_to(-g * ad / (bd * bd), b.shape)
    return _node(out, (a, b), bw)


# ---------------------------------------------------------------------------
# elementwise unary ops


def power(x: Tensor, exponent: float) -> Tensor:
    out = x.data ** exponent

    def bw(g):
        return (g * exponent * x.data ** (exponent - 1),)
    return _node(out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)
    return _node(out, (x,), bw)


def log(x: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the argument is clamped below first."""
    if floor is None:
        arg = x.data
        live = None
    else:
        live = x.data > floor
        arg = np.where(live, x.data, floor)
    out = np.log(arg)

    def bw(g):
        gx = g / arg
        return (gx if live is None else np.where(live, gx, 0.0),)
    return _node(out, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - out * out),)
    return _node(out, (x,), bw)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)

    def bw(g):
        return (g * out * (1.0 - out),)
    return _node(out, (x,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner),)
    return _node(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _node(out, (x,), bw)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)
    return _node(out, (x,), bw)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return permute(x, (1, 0))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def bw(g):
        return (np.transpose(g, inverse),)
    return _node(out, (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _node(out, tuple(xs), bw)


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select a single position along ``axis`` (the axis is dropped)."""
    out = np.take(x.data, index, axis=axis)

    def bw(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)
    return _node(out, (x,), bw)


def scatter_rows(grad: np.ndarray, index: np.ndarray, n_rows: int) -> np.ndarray:
    """Adjoint of :func:`gather_rows`: sum ``grad`` rows into their source rows."""
    index = np.asarray(index)
    width = grad.shape[-1]
    out = np.zeros((n_rows, width))
    np.add.at(out, index.reshape(-1), grad.reshape(-1, width))
    return out


def gather_rows(table: Tensor, index) -> Tensor:
    """Embedding lookup: ``table[index]`` for an integer array of any shape."""
    index = np.asarray(index, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"gather_rows needs a 2-D table, got shape {table.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise DimensionError(f"row index out of range for table with {table.shape[0]} rows")
    out = table.data[index]

    def bw(g):
        return (scatter_rows(g, index, table.shape[0]),)
    return _node(out, (table,), bw)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true (numpy broadcasting against x)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, value, x.data)

    def bw(g):
        return (np.where(mask, 0.0, g),)
    return _node(out, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape [..., k] and a matrix ``b`` of shape [k, n]."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb
    return _node(out, (a, b), bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over matching leading axes."""
    if a.ndim < 3 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g
    return _node(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# normalisations


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``x / temperature``, row-max stabilised."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner) / temperature,)
    return _node(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm params {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return _node(out, (x, gain, bias), bw)


def l2_norm(x: Tensor, eps: float = 0.0) -> Tensor:
    """Euclidean norm along the last axis, floored at ``eps``."""
    raw = np.sqrt((x.data * x.data).sum(axis=-1))
    live = raw > eps
    out = np.where(live, raw, eps)

    def bw(g):
        safe = np.where(live, raw, 1.0)
        return (np.where(live, g / safe, 0.0)[..., None] * x.data,)
    return _node(out, (x,), bw)


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each last-axis vector to unit length (norm floored at ``eps``)."""
    raw = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    live = raw > eps
    norm = np.where(live, raw, eps)
    out = x.data / norm

    def bw(g):
        radial = np.where(live, (g * out).sum(axis=-1, keepdims=True), 0.0)
        return ((g - out * radial) / norm,)
    return _node(out, (x,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a mask drawn from ``rng``."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    out = x.data * keep

    def bw(g):
        return (g * keep,)
    return _node(out, (x,), bw)

