"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a row-major ``numpy.ndarray``.  Primitive operations
are only recorded while a :class:`GradTape` is active on the current thread
and at least one input requires a gradient; outside a tape every operation is
a plain numpy computation.  Typical use::

    with GradTape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad  # == 2 * x.data
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

DEFAULT_DTYPE = np.float64

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["GradTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("inputs", "output", "backward", "tape")

    def __init__(self, inputs, output, backward, tape):
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.tape = tape


class Tensor:
    """An n-dimensional array of reals with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    # -- introspection -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in tensor of shape {self.shape}")
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar ------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; use mul")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and not isinstance(x, np.ndarray):
        dtype = DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


class GradTape:
    """Ordered record of primitive applications for one backward pass.

    The tape is a context manager; nesting is allowed and the innermost tape
    records.  A tape can be replayed once, after which its nodes are dropped.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "GradTape":
        if self.consumed:
            raise ContractError("tape already consumed by backward()")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse across threads
            raise ContractError("GradTape exited out of order")

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise ContractError("tape already consumed by backward()")
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or loss._node.tape is not self:
            raise ContractError("loss was not produced on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    gi = np.asarray(gi, dtype=inp.data.dtype).reshape(inp.shape)
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        self.nodes = []
        self.consumed = True


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires-grad leaf's ``grad``."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise ContractError("loss was not produced through taped primitives")
    loss._node.tape.backward(loss)


def custom_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out_data`` as the output of a primitive.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(tuple(inputs), out, backward_fn, tape)
        out._node = node
        tape.nodes.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    dtype = (a if isinstance(a, Tensor) else b).dtype
    return as_tensor(a, dtype), as_tensor(b, dtype)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    return custom_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    return custom_op(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    return custom_op(a.data * s, (a,), lambda g: (g * s,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return custom_op(a.data * sig, (a,), lambda g: (g * sig * (1.0 + a.data * (1.0 - sig)),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 1.0 / (1.0 + np.exp(-x))
    return custom_op(out, (a,), lambda g: (g * sig,))


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    return custom_op(out, (a,), lambda g: (_unbroadcast(np.where(mask, 0.0, g), a.shape),))


# -- linear algebra / shape ------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return custom_op(out, (a, b), bw)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        if a.ndim < 2:
            raise DimensionError("transpose needs at least 2 dims")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return custom_op(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return custom_op(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op(out, tensors, bw)


def getitem(a: Tensor, index) -> Tensor:
    parts = index if isinstance(index, tuple) else (index,)
    if not all(p is Ellipsis or p is None or isinstance(p, (int, np.integer, slice)) for p in parts):
        raise TypeError("only basic (slice) indexing is differentiable; use gather/embedding")
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return custom_op(np.array(out), (a,), bw)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    return getitem(a, (Ellipsis, slice(start, stop)))


def repeat_interleave(a: Tensor, repeats: int, axis: int) -> Tensor:
    if repeats == 1:
        return a
    axis = axis % a.ndim
    out = np.repeat(a.data, repeats, axis=axis)

    def bw(g):
        shape = a.shape[:axis] + (a.shape[axis], repeats) + a.shape[axis + 1:]
        return (g.reshape(shape).sum(axis=axis + 1),)

    return custom_op(out, (a,), bw)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()
    return custom_op(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


# -- reductions -------------------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return custom_op(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- normalisation / softmax ------------------------------------------------
def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return custom_op(p, (x,), bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return custom_op(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    n = x.shape[-1]

    def bw(g):
        gx_hat = g * gain.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return custom_op(xhat * gain.data + bias.data, (x, gain, bias), bw)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * r
    n = x.shape[-1]

    def bw(g):
        gx_hat = g * gain.data
        gx = r * (gx_hat - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, _unbroadcast(g * xhat, gain.shape)

    return custom_op(xhat * gain.data, (x, gain), bw)


# -- indexing ---------------------------------------------------------------
def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return custom_op(out, (table,), bw)


def gather_last(x: Tensor, idx) -> Tensor:
    """Pick ``x[..., idx[...]]`` along the last axis; ``idx`` has shape x.shape[:-1]."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise DimensionError(f"gather_last: index shape {idx.shape} vs tensor {x.shape}")
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return custom_op(out, (x,), bw)
