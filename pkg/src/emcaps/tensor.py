"""Dense tensors and a tape-based reverse-mode differentiation engine.

Every primitive computes its forward value with numpy. When a :class:`Tape`
is active and at least one operand depends on a registered parameter, the
primitive appends a :class:`Node` holding the forward recomputation and the
vector-Jacobian product. :func:`backward` walks the nodes in reverse.

Usage::

    tape = Tape()
    w = tape.parameter("w", np.ones(3))
    with tape:
        loss = (w * w).sum()
    grads = backward(tape, loss)     # {"w": array([2., 2., 2.])}
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-30

_default_dtype = np.dtype(np.float64)
_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradientError(ArithmeticError):
    """Raised when backward meets a non-scalar output or a NaN adjoint."""


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


def get_default_dtype() -> np.dtype:
    return _default_dtype


class Tensor:
    """Immutable n-dimensional array with an optional place on the tape."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=dtype or _default_dtype)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operators
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # method forms
    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def logistic(self):
        return logistic(self)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward: Callable[..., np.ndarray]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records primitives applied to parameters while active (``with tape:``).

    A tape is single-writer: one forward/backward pass owns it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: dict[str, Tensor] = {}

    def parameter(self, name: str, value) -> Tensor:
        if name in self.parameters:
            raise KeyError(f"parameter {name!r} already registered")
        if self.nodes:
            raise RuntimeError("parameters must be registered before the forward pass")
        arr = np.asarray(value)
        t = Tensor(arr, dtype=arr.dtype if arr.dtype.kind == "f" else None, requires_grad=True, name=name)
        self.parameters[name] = t
        return t

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded node from its inputs, in tape order."""
        values: dict[int, np.ndarray] = {}
        out = []
        for node in self.nodes:
            args = [values.get(id(t), t.data) for t in node.inputs]
            v = node.forward(*args)
            values[id(node.output)] = v
            out.append(v)
        return out

    def replay_matches(self) -> bool:
        return all(
            np.array_equal(v, node.output.data, equal_nan=True) and v.dtype == node.output.dtype
            for v, node in zip(self.replay(), self.nodes)
        )


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _record(op, inputs, out_arr, forward, vjp) -> Tensor:
    out = Tensor._wrap(out_arr)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, tuple(inputs), out, forward, vjp))
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# elementwise binary


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data, np.add,
                   lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data, np.subtract,
                   lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (unbroadcast(g * bd, ad.shape) if na else None,
                unbroadcast(g * ad, bd.shape) if nb else None)

    return _record("mul", (a, b), ad * bd, np.multiply, vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    nb = b.requires_grad

    def vjp(g):
        ga = g / bd
        return unbroadcast(ga, ad.shape), unbroadcast(-ga * out, bd.shape) if nb else None

    return _record("div", (a, b), out, np.divide, vjp)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    _broadcast_shape("maximum", a, b)
    ad, bd = a.data, b.data
    mask = ad >= bd
    return _record("maximum", (a, b), np.maximum(ad, bd), np.maximum,
                   lambda g: (unbroadcast(g * mask, ad.shape), unbroadcast(g * ~mask, bd.shape)))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where the constant boolean mask ``cond`` holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _pair(a, b)
    try:
        np.broadcast_shapes(cond.shape, a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"where: mask {cond.shape} with shapes {a.shape} and {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _record("where", (a, b), np.where(cond, a.data, b.data),
                   lambda x, y: np.where(cond, x, y),
                   lambda g: (unbroadcast(np.where(cond, g, 0), sa), unbroadcast(np.where(cond, 0, g), sb)))


# elementwise unary


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _record("neg", (x,), -x.data, np.negative, lambda g: (-g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record("exp", (x,), out, np.exp, lambda g: (g * out,))


def _guarded_log(v):
    return np.log(np.maximum(v, LOG_FLOOR))


def log(x) -> Tensor:
    """Natural log with inputs clamped below at ``LOG_FLOOR``."""
    x = as_tensor(x)
    xd = x.data
    return _record("log", (x,), _guarded_log(xd), _guarded_log,
                   lambda g: (np.where(xd > LOG_FLOOR, g / np.maximum(xd, LOG_FLOOR), 0),))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _record("sqrt", (x,), out, np.sqrt, lambda g: (g * 0.5 / out,))


def _logistic(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def logistic(x) -> Tensor:
    x = as_tensor(x)
    out = _logistic(x.data)
    return _record("logistic", (x,), out, _logistic, lambda g: (g * out * (1.0 - out),))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record("square", (x,), xd * xd, np.square, lambda g: (2.0 * g * xd,))


def relu(x) -> Tensor:
    return maximum(x, 0.0)


# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need >= 2 dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = unbroadcast(_mm(g, np.swapaxes(bd, -1, -2)), ad.shape) if na else None
        gb = unbroadcast(_mm(np.swapaxes(ad, -1, -2), g), bd.shape) if nb else None
        return ga, gb

    return _record("matmul", (a, b), _mm(ad, bd), _mm, vjp)


def _mm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # outer products are much faster as broadcast multiplies than as stacked matmuls
    if x.shape[-1] == 1:
        return x * y
    return np.matmul(x, y)


# reductions and shape ops


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _record("sum", (x,), x.data.sum(axis=axes, keepdims=keepdims),
                   lambda v: v.sum(axis=axes, keepdims=keepdims), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return reduce_sum(x, axes, keepdims) / float(n)


def reduce_max(x, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; tied maxima share the gradient equally."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    xd = x.data
    kept = xd.max(axis=axes, keepdims=True)

    def vjp(g):
        mask = xd == kept
        count = mask.sum(axis=axes, keepdims=True)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * mask / count,)

    out = kept if keepdims else np.squeeze(kept, axis=axes)
    return _record("max", (x,), out, lambda v: v.max(axis=axes, keepdims=keepdims), vjp)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    sx = x.shape
    return _record("broadcast", (x,), out, lambda v: np.broadcast_to(v, shape),
                   lambda g: (unbroadcast(g, sx),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    sx = x.shape
    return _record("reshape", (x,), out, lambda v: v.reshape(shape), lambda g: (g.reshape(sx),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (x,), x.data.transpose(axes), lambda v: v.transpose(axes),
                   lambda g: (g.transpose(inv),))


def take(x, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"take: index out of range for axis {axis} of shape {x.shape}")
    sx = x.shape
    flat = idx.ravel()
    counts = np.bincount(flat, minlength=n)
    unique = bool(np.all(counts <= 1))

    def vjp(g):
        # bring the gathered axes to the front, scatter-add rows
        g = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        g = g.reshape((flat.size,) + g.shape[idx.ndim:])
        z = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
        if unique:
            z[flat] = g
        else:
            np.add.at(z, flat, g)
        return (np.moveaxis(z, 0, axis).reshape(sx),)

    return _record("take", (x,), np.take(x.data, idx, axis=axis),
                   lambda v: np.take(v, idx, axis=axis), vjp)


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    sx, dt = x.shape, x.dtype
    parts = key if isinstance(key, tuple) else (key,)
    basic = not any(isinstance(k, (np.ndarray, list, Tensor)) for k in parts)

    def vjp(g):
        z = np.zeros(sx, dtype=dt)
        if basic:
            z[key] = g     # basic indexing never repeats an element
        else:
            np.add.at(z, key, g)
        return (z,)

    return _record("getitem", (x,), x.data[key], lambda v: v[key], vjp)


def pad(x, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` as for ``numpy.pad``."""
    x = as_tensor(x)
    pw = tuple(tuple(p) for p in pad_width)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pw, x.shape))
    return _record("pad", (x,), np.pad(x.data, pw), lambda v: np.pad(v, pw),
                   lambda g: (g[sl],))


def stop_gradient(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._wrap(x.data)


# reverse pass


def backward(tape: Tape, output: Tensor) -> dict[str, np.ndarray]:
    """Gradient of the scalar ``output`` with respect to every registered parameter."""
    if output.size != 1 or output.ndim != 0:
        raise GradientError(f"backward needs a scalar output, got shape {output.shape}")
    adj: dict[int, np.ndarray] = {id(output): np.ones((), dtype=output.dtype)}
    for k in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[k]
        g = adj.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if np.isnan(np.sum(gi)):
                raise GradientError(f"NaN adjoint flowing out of node {k} ({node.op})")
            key = id(inp)
            prev = adj.get(key)
            adj[key] = gi if prev is None else prev + gi
    return {
        name: np.array(adj.get(id(p), np.zeros(p.shape, dtype=p.dtype)), dtype=p.dtype)
        for name, p in tape.parameters.items()
    }
