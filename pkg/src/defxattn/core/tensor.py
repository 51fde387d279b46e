"""Dense float64 tensors with a recorded tape for reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape nothing is recorded, which
is how inference and finite-difference evaluation run without graph overhead::

    with Tape() as tape:
        loss = (x * x).sum()
    backward(loss, tape)
    x.grad            # 2 * x

Broadcasting is limited to the leading-batch rule: the lower-rank operand's
shape must equal the trailing part of the higher-rank operand's shape.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import AxisError, GraphError, NonFiniteError, ShapeError

_TAPES: list["Tape"] = []
_NAN_GUARD = False


def set_nan_guard(enabled: bool) -> bool:
    """Enable or disable finiteness checks on every op output; returns the old value."""
    global _NAN_GUARD
    old = _NAN_GUARD
    _NAN_GUARD = bool(enabled)
    return old


def nan_guard_enabled() -> bool:
    return _NAN_GUARD


@contextlib.contextmanager
def nan_guard(enabled: bool = True):
    old = set_nan_guard(enabled)
    try:
        yield
    finally:
        set_nan_guard(old)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if requires_grad and not arr.flags.writeable:
            arr = arr.copy()
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        from .functional import matmul

        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    tape: "Tape"


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is topologically sorted
    by construction; :func:`backward` replays it in reverse.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def first_non_finite(self) -> Node | None:
        """First recorded op whose output holds NaN or Inf."""
        for node in self.nodes:
            if not np.isfinite(node.output.data).all():
                return node
        return None


@contextlib.contextmanager
def no_record():
    """Suspend every active tape (used for finite differences and inference)."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, shape: Sequence[int] | None = None, requires_grad: bool = False,
           name: str | None = None) -> Tensor:
    """Create a tensor, optionally from flat row-major ``data`` and explicit ``shape``."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise ShapeError(f"extents must be >= 1, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"shape {shape} needs {int(np.prod(shape))} values, got {arr.size}")
        arr = arr.reshape(shape)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def _record(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _NAN_GUARD and not np.isfinite(data).all():
        names = ", ".join(t.name for t in inputs if t.name) or "intermediate"
        raise NonFiniteError(f"non-finite values produced by op '{op}' (inputs: {names})")
    if _TAPES and any(t.requires_grad for t in inputs):
        tape = _TAPES[-1]
        out.requires_grad = True
        node = Node(op, tuple(inputs), out, backward, tape)
        out._node = node
        tape.nodes.append(node)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise GraphError("loss was not produced by a recorded operation (detached graph)")
    if tape is None:
        tape = node.tape
    elif node.tape is not tape:
        raise GraphError("loss was recorded on a different tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for n in reversed(tape.nodes):
        g = grads.pop(id(n.output), None)
        if g is None:
            continue
        for inp, gi in zip(n.inputs, n.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp._node is None:
                leaves[key] = inp
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    for key, leaf in leaves.items():
        g = grads[key]
        if g.shape != leaf.shape:
            g = np.broadcast_to(g, leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


class ParameterStore(dict):
    """Named trainable tensors. Names are unique and insertion ordered."""

    def add(self, name: str, value, requires_grad: bool = True) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=requires_grad, name=name)
        self[name] = t
        return t

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def num_params(self, prefix: str = "") -> int:
        return sum(t.size for k, t in self.items() if k.startswith(prefix))

    def subset(self, prefix: str) -> "ParameterStore":
        out = ParameterStore()
        for k, t in self.items():
            if k.startswith(prefix):
                out[k] = t
        return out


# ---------------------------------------------------------------------------
# broadcasting helpers

def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.ndim == 0 or b.ndim == 0 or a.shape == b.shape:
        return
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    if big.shape[big.ndim - small.ndim:] != small.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not leading-batch compatible")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g


def _operands(a, b):
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, "mul", (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, "div", (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    ad = a.data
    if p == 2.0:
        return _record(ad * ad, "square", (a,), lambda g: (2.0 * ad * g,))
    return _record(ad ** p, "pow", (a,), lambda g: (p * ad ** (p - 1.0) * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(np.log(ad), "log", (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise AxisError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _record(np.asarray(out), "sum", (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axes, keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    src = a.shape
    return _record(out, "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise AxisError(f"invalid permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def _has_array_index(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    if isinstance(key, Tensor):
        raise TypeError("index with numpy arrays, not tensors")
    out = a.data[key]
    shape = a.shape
    fancy = _has_array_index(key)

    def bw(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _record(np.array(out), "getitem", (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    (ax,) = _norm_axis(axis, ndim)
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _record(np.concatenate([t.data for t in tensors], axis=ax), "concat", tuple(tensors),
                   lambda g: tuple(np.split(g, sizes, axis=ax)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len({t.shape for t in tensors}) != 1:
        raise ShapeError(f"stack: shapes differ {[t.shape for t in tensors]}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    return _record(out, "stack", tuple(tensors),
                   lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))))


def pad(a, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one (before, after) pair per axis."""
    a = as_tensor(a)
    widths = [(int(lo), int(hi)) for lo, hi in widths]
    if len(widths) != a.ndim:
        raise ShapeError(f"pad: {len(widths)} width pairs for rank {a.ndim}")
    if all(lo == 0 and hi == 0 for lo, hi in widths):
        return a
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _record(np.pad(a.data, widths), "pad", (a,), lambda g: (g[sl],))


def roll(a, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(int(x) for x in axes)
    if not any(shifts):
        return a
    back = tuple(-s for s in shifts)
    return _record(np.roll(a.data, shifts, axes), "roll", (a,), lambda g: (np.roll(g, back, axes),))
