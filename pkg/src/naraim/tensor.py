"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records its parents and a backward closure on the output tensor.
Creation order is tracked by a monotonically increasing id, so sorting the
reachable nodes by id (descending) gives a deterministic reverse topological
order for backpropagation.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
from scipy.special import erf

LAYER_NORM_EPS = 1e-6

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand dims are incompatible for an op."""


class ContractError(ValueError):
    """Raised when a caller violates an operation's precondition."""


class Tensor:
    __slots__ = ("data", "_parents", "_backward", "_id")

    def __init__(self, data, _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self._parents = _parents
        self._backward = _backward
        self._id = next(_ids)

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor with dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class ParamTree(dict):
    """Mapping of hierarchical names to tensors; iterates in sorted key order."""

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(dict.keys(self)))

    def keys(self):
        return list(iter(self))

    def items(self):
        return [(k, dict.__getitem__(self, k)) for k in self]

    def values(self):
        return [dict.__getitem__(self, k) for k in self]

    def subtree(self, prefix: str) -> ParamTree:
        return ParamTree({k: v for k, v in self.items() if k.startswith(prefix)})

    def copy(self) -> ParamTree:
        return ParamTree(dict(self.items()))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_dims(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible dims {a.dims} and {b.dims}") from None


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_dims("add", a, b)

    def backward(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                _unbroadcast(g, b.shape) if need[1] else None)

    return Tensor(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_dims("sub", a, b)

    def backward(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                _unbroadcast(-g, b.shape) if need[1] else None)

    return Tensor(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_dims("mul", a, b)

    def backward(g, need):
        return (_unbroadcast(g * b.data, a.shape) if need[0] else None,
                _unbroadcast(g * a.data, b.shape) if need[1] else None)

    return Tensor(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_dims("div", a, b)
    out = a.data / b.data

    def backward(g, need):
        return (_unbroadcast(g / b.data, a.shape) if need[0] else None,
                _unbroadcast(-g * out / b.data, b.shape) if need[1] else None)

    return Tensor(out, (a, b), backward)


# -- linear algebra and shape ------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two dims; leading dims broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible dims {a.dims} and {b.dims}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible dims {a.dims} and {b.dims}") from None

    if b.data.ndim == 2:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data

    def backward(g, need):
        ga = gb = None
        if need[0]:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if need[1]:
            if b.data.ndim == 2:
                # shared weight matrix: fold the batch dims into one reduction
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor(out, (a, b), backward)


def transpose_last_two(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError(f"transpose-last-two: need rank >= 2, got dims {x.dims}")

    def backward(g, need):
        return (np.swapaxes(g, -1, -2),)

    return Tensor(np.swapaxes(x.data, -1, -2), (x,), backward)


def reshape(x: Tensor, dims: Sequence[int]) -> Tensor:
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims)) != x.data.size or any(d <= 0 for d in dims):
        raise ShapeError(f"reshape: cannot reshape dims {x.dims} to {list(dims)}")

    def backward(g, need):
        return (g.reshape(x.shape),)

    return Tensor(x.data.reshape(dims), (x,), backward)


def concat_last_dim(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ShapeError(f"concat-last-dim: incompatible dims {xs[0].dims} and {x.dims}")
    bounds = np.cumsum([0] + [x.shape[-1] for x in xs])

    def backward(g, need):
        return tuple(g[..., lo:hi] if n else None
                     for lo, hi, n in zip(bounds[:-1], bounds[1:], need))

    return Tensor(np.concatenate([x.data for x in xs], axis=-1), tuple(xs), backward)


def slice_(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    axis = axis % x.data.ndim
    size = x.shape[axis]
    if not 0 <= start < stop <= size:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for axis {axis} of dims {x.dims}")
    index = (slice(None),) * axis + (slice(start, stop),)

    def backward(g, need):
        out = np.zeros(x.shape)
        out[index] = g
        return (out,)

    return Tensor(x.data[index], (x,), backward)


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true with a constant; no gradient flows there."""
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise ShapeError(f"masked-fill: incompatible dims {x.dims} and {list(mask.shape)}") from None

    def backward(g, need):
        return (np.where(full, 0.0, g),)

    return Tensor(np.where(full, value, x.data), (x,), backward)


# -- reductions and normalizers ----------------------------------------------

def sum_(x: Tensor) -> Tensor:
    def backward(g, need):
        return (np.broadcast_to(g.reshape(()), x.shape).copy(),)

    return Tensor(x.data.sum(), (x,), backward)


def mean_last_dim(x: Tensor) -> Tensor:
    n = x.shape[-1]

    def backward(g, need):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return Tensor(x.data.mean(axis=-1, keepdims=True), (x,), backward)


def softmax_last_dim(x: Tensor) -> Tensor:
    """Softmax along the last dim; rows that are entirely -inf yield zeros."""
    m = x.data.max(axis=-1, keepdims=True)
    dead = ~np.isfinite(m)
    e = np.exp(x.data - np.where(dead, 0.0, m))
    s = e.sum(axis=-1, keepdims=True)
    y = np.where(dead, 0.0, e / np.where(dead, 1.0, s))

    def backward(g, need):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor(y, (x,), backward)


def layer_norm_last_dim(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """(x - mean) / sqrt(var + eps) along the last dim, no affine part."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def backward(g, need):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return Tensor(y, (x,), backward)


# -- elementwise unary -------------------------------------------------------

_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT1_2))

    def backward(g, need):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return Tensor(x.data * cdf, (x,), backward)


def sin(x: Tensor) -> Tensor:
    return Tensor(np.sin(x.data), (x,), lambda g, need: (g * np.cos(x.data),))


def cos(x: Tensor) -> Tensor:
    return Tensor(np.cos(x.data), (x,), lambda g, need: (-g * np.sin(x.data),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor(y, (x,), lambda g, need: (g * y,))


def log(x: Tensor) -> Tensor:
    return Tensor(np.log(x.data), (x,), lambda g, need: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return Tensor(y, (x,), lambda g, need: (g * 0.5 / y,))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sub": sub,
    "div": div,
    "transpose-last-two": transpose_last_two,
    "reshape": reshape,
    "concat-last-dim": lambda *xs: concat_last_dim(xs),
    "softmax-last-dim": softmax_last_dim,
    "layer-norm-last-dim": layer_norm_last_dim,
    "gelu": gelu,
    "sin": sin,
    "cos": cos,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "mean-last-dim": mean_last_dim,
    "sum": sum_,
    "slice": slice_,
    "masked-fill": masked_fill,
}


def primitive(op_name: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by its canonical name."""
    try:
        fn = PRIMITIVES[op_name]
    except KeyError:
        raise ContractError(f"unknown primitive {op_name!r}") from None
    return fn(*inputs, **kwargs)


# -- differentiation ---------------------------------------------------------

def gradient(loss: Tensor, params: Mapping[str, Tensor]) -> ParamTree:
    """Cotangents of a scalar ``loss`` w.r.t. each tensor in ``params``.

    Parameters not reachable from the loss get zero tensors.
    """
    if loss.data.size != 1:
        raise ContractError(f"gradient: loss must be scalar, got dims {loss.dims}")

    targets = {id(t) for t in params.values()}
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in nodes:
            continue
        nodes[id(node)] = node
        stack.extend(node._parents)
    order = sorted(nodes.values(), key=lambda t: t._id)

    # A node needs a cotangent if it is a target or depends on one.
    needs: dict[int, bool] = {}
    for node in order:
        needs[id(node)] = id(node) in targets or any(needs[id(p)] for p in node._parents)

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None or not needs[id(node)]:
            continue
        need = tuple(needs[id(p)] for p in node._parents)
        for parent, pg, n in zip(node._parents, node._backward(g, need), need):
            if not n or pg is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else np.asarray(pg, dtype=np.float64)

    return ParamTree({name: Tensor(grads.get(id(t), np.zeros(t.shape)).reshape(t.shape).copy())
                      for name, t in params.items()})


def finite_difference_gradient(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    entries: Mapping[str, Iterable[int]] | None = None,
) -> ParamTree:
    """Central differences (f(x+h) - f(x-h)) / 2h per scalar parameter.

    ``entries`` optionally restricts the probed flat indices per tensor; other
    entries of the returned cotangents are left at zero.
    """
    if h <= 0:
        raise ContractError("finite_difference_gradient: h must be positive")
    base = {k: v.data.copy() for k, v in params.items()}
    out = ParamTree()
    for name in sorted(base):
        flat = base[name].reshape(-1)
        grad = np.zeros(flat.size)
        indices = range(flat.size) if entries is None else entries.get(name, ())
        for i in indices:
            vals = []
            for delta in (h, -h):
                probe = flat.copy()
                probe[i] += delta
                trial = {k: Tensor(v) for k, v in base.items()}
                trial[name] = Tensor(probe.reshape(base[name].shape))
                vals.append(loss_fn(ParamTree(trial)).item())
            grad[i] = (vals[0] - vals[1]) / (2 * h)
        out[name] = Tensor(grad.reshape(base[name].shape))
    return out


def directional_derivative(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    direction: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> float:
    """Central-difference derivative of ``loss_fn`` along ``direction``."""
    vals = []
    for sign in (1.0, -1.0):
        trial = ParamTree({k: Tensor(v.data + sign * h * direction[k]) if k in direction else Tensor(v.data)
                           for k, v in params.items()})
        vals.append(loss_fn(trial).item())
    return (vals[0] - vals[1]) / (2 * h)


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor) over entries."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
