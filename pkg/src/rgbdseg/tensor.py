"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable op records a :class:`TapeNode` on its output. Nodes carry
a global sequence number, so the set of nodes reachable from a loss is exactly
a slice of the append-only tape; :func:`backward` replays that slice in
reverse sequence order.
"""

from __future__ import annotations

import itertools
import struct
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeNode",
    "DimensionError",
    "NonFiniteError",
    "GraphError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "swapaxes",
    "reshape",
    "concat",
    "split",
    "sum",
    "mean",
    "save_tensor",
    "load_tensor",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf reached an op boundary."""


class GraphError(RuntimeError):
    """Misuse of the tape: non-scalar loss, detached graph or replayed backward."""


_seq = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording tape nodes."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class TapeNode:
    __slots__ = ("op", "inputs", "backward_fn", "seq", "consumed")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        # the closure owns whatever forward values the rule needs
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.consumed = False

    def __repr__(self) -> str:
        return f"TapeNode({self.op}, seq={self.seq})"


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {where}")


class Tensor:
    """A float64 array plus an optional gradient buffer.

    ``data`` is treated as immutable once a tensor has been used in a taped
    forward pass; optimizers replace parameter values in place only between
    steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: TapeNode | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str, inputs: tuple["Tensor", ...], backward_fn) -> "Tensor":
        _check_finite(arr, op)
        out = cls.__new__(cls)
        out.data = arr
        out.grad = None
        out.name = None
        out._node = None
        out.requires_grad = False
        if is_grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._node = TapeNode(op, inputs, backward_fn)
        return out

    # -- introspection -------------------------------------------------

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
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._node = None
        out.name = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------

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
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._wrap(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._wrap(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._wrap(ad * bd, "mul", (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return Tensor._wrap(-a.data, "neg", (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner axes differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch axes differ: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._wrap(ad @ bd, "matmul", (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) % a.ndim for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return Tensor._wrap(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return Tensor._wrap(out, "reshape", (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._wrap(out, "concat", tensors, bw)


def roll(a: Tensor, shift: int, axis: int = 0) -> Tensor:
    """Cyclic shift along ``axis`` (``numpy.roll`` semantics)."""
    def bw(g):
        return (np.roll(g, -shift, axis=axis),)

    return Tensor._wrap(np.roll(a.data, shift, axis=axis), "roll", (a,), bw)


def split(a: Tensor, sections: int, axis: int = 0) -> list[Tensor]:
    """Split into ``sections`` equal pieces along ``axis``."""
    n = a.shape[axis]
    if sections <= 0 or n % sections:
        raise DimensionError(f"cannot split axis of length {n} into {sections}")
    step = n // sections
    out = []
    for k in range(sections):
        index = [slice(None)] * a.ndim
        index[axis] = slice(k * step, (k + 1) * step)
        index = tuple(index)

        def bw(g, index=index):
            full = np.zeros(a.shape)
            full[index] = g
            return (full,)

        out.append(Tensor._wrap(a.data[index], "split", (a,), bw))
    return out


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._wrap(np.asarray(out), "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# reverse pass


def _reachable(loss: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._node is None:
            continue
        seen.add(id(t))
        order.append(t)
        stack.extend(t._node.inputs)
    order.sort(key=lambda t: t._node.seq, reverse=True)
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf that ``loss`` depends on.

    Gradients accumulate into existing leaf buffers. A taped graph can be
    replayed once; a second call raises :class:`GraphError`.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if not loss.requires_grad:
            raise GraphError("loss is detached from any taped computation")
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    if loss._node.consumed:
        raise GraphError("backward already ran on this graph; rebuild the forward pass")

    nodes = _reachable(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in nodes:
        node = t._node
        g = grads.pop(id(t), None)
        if g is None:
            node.consumed = True
            continue
        if node.consumed:
            raise GraphError(f"{node.op} node was already replayed by an earlier backward")
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            _check_finite(ig, f"backward of {node.op}")
            if inp._node is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
        # saved forward values are released with the closure
        node.backward_fn = None
        node.consumed = True


# ---------------------------------------------------------------------------
# serialization: b"TNSR", u32 rank, u32 dims, little-endian f64 payload

_MAGIC = b"TNSR"


def save_tensor(path: str | Path, t: Tensor | np.ndarray) -> None:
    arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
    header = _MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def load_tensor(path: str | Path, requires_grad: bool = False) -> Tensor:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", raw, 4)
    end = 8 + 4 * rank
    if len(raw) < end:
        raise ValueError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - end != 8 * count:
        raise ValueError(f"{path}: payload holds {len(raw) - end} bytes, expected {8 * count}")
    arr = np.frombuffer(raw, dtype="<f8", offset=end).reshape(dims).astype(np.float64)
    return Tensor(arr, requires_grad=requires_grad)
