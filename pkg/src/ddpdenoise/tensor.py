"""Tensor storage, emulated binary16, and a reverse-mode tape.

Tensors wrap a contiguous numpy buffer in row-major order. ``F16E`` tensors
are stored as float32 buffers whose values are all exactly representable in
IEEE 754 binary16; ``round_to_f16`` is the only way values get there.

Autograd records one :class:`Node` per tracked operation. Node ids come from
a process-wide counter, so sorting the nodes reachable from a loss by id
recovers the order they were appended in; :func:`backward` walks that order
in reverse.
"""
from __future__ import annotations

import contextlib
import enum
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, SizeError

F16_MAX = 65504.0


class DType(enum.Enum):
    F64 = "F64"
    F32 = "F32"
    F16E = "F16E"

    @property
    def storage(self):
        return np.float64 if self is DType.F64 else np.float32

    @property
    def accum(self):
        """Accumulation dtype for reductions and gradients."""
        return np.float64 if self is DType.F64 else np.float32


def round_to_f16(x) -> np.ndarray:
    """Round to the nearest binary16 value, ties to even.

    Works on the float64 value directly so there is no double rounding.
    Magnitudes that round past 65504 become infinities; NaN and inf pass
    through. Returns float64.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    mask = np.isfinite(x) & (x != 0.0)
    if not mask.any():
        return x
    v = x[mask]
    _, exp = np.frexp(np.abs(v))
    # exponent of the leading bit, clamped at the subnormal range
    lead = np.maximum(exp - 1, -14)
    ulp = np.ldexp(1.0, lead - 10)
    with np.errstate(over="ignore"):
        q = np.rint(v / ulp) * ulp
    over = np.abs(q) > F16_MAX
    q[over] = np.copysign(np.inf, v[over])
    x[mask] = q
    return x


_state = threading.local()
_node_ids = itertools.count()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    __slots__ = ("id", "op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.id = next(_node_ids)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "dtype", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, dtype: DType = DType.F32, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=dtype.storage)
        if dtype is DType.F16E:
            arr = round_to_f16(arr).astype(np.float32)
        self.data = arr
        self.dtype = dtype
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.value}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)


def create(shape: Sequence[int], fill=0.0, dtype: DType = DType.F32,
           requires_grad: bool = False) -> Tensor:
    """Build a tensor from a scalar fill or a flat buffer."""
    shape = tuple(int(s) for s in shape)
    n = int(np.prod(shape, dtype=np.int64))
    if np.isscalar(fill):
        data = np.full(shape, fill, dtype=dtype.storage)
    else:
        buf = np.asarray(fill, dtype=dtype.storage).reshape(-1)
        if buf.size != n:
            raise SizeError(f"buffer of length {buf.size} does not fill shape {shape}")
        data = buf.reshape(shape)
    return Tensor(data, dtype, requires_grad)


def result(data: np.ndarray, dtype: DType, parents: Iterable[Tensor], op: str,
           backward_fn: Callable) -> Tensor:
    """Wrap a kernel output and record it on the tape when any parent is tracked.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data, dtype=dtype.storage)
    out.dtype = dtype
    out.grad = None
    out._node = None
    out.requires_grad = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, parents, backward_fn)
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise SizeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    if a.dtype is not b.dtype:
        raise SizeError(f"{op}: dtypes {a.dtype.value} and {b.dtype.value} differ")


def _finish(arr: np.ndarray, dtype: DType) -> np.ndarray:
    if dtype is DType.F16E:
        return round_to_f16(arr).astype(np.float32)
    return arr


def cast(t: Tensor, to: DType) -> Tensor:
    """Convert dtype. Backward converts the gradient back to the source dtype."""
    if to is t.dtype:
        return t
    src = t.dtype
    if to is DType.F16E:
        data = round_to_f16(t.data).astype(np.float32)
    else:
        data = t.data.astype(to.storage)

    def backward(g):
        if src is DType.F16E:
            return (round_to_f16(g).astype(np.float32),)
        return (g.astype(src.accum),)

    return result(data, to, (t,), "cast", backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return result(_finish(a.data + b.data, a.dtype), a.dtype, (a, b), "add",
                  lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return result(_finish(a.data - b.data, a.dtype), a.dtype, (a, b), "sub",
                  lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return result(_finish(ad * bd, a.dtype), a.dtype, (a, b), "mul",
                  lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar."""
    c = a.dtype.storage(c)
    return result(_finish(a.data * c, a.dtype), a.dtype, (a,), "scale",
                  lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return result(np.where(mask, a.data, 0).astype(a.data.dtype), a.dtype, (a,), "relu",
                  lambda g: (np.where(mask, g, 0).astype(g.dtype),))


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if op == "relu":
        return relu(a)
    if b is None:
        raise ContractError(f"{op} needs two operands")
    return {"add": add, "sub": sub, "mul": mul}[op](a, b)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Join [N,Ca,H,W] and [N,Cb,H,W] along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise SizeError("concat_channels expects 4-d tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise SizeError(f"concat_channels: {a.shape} vs {b.shape}")
    if a.dtype is not b.dtype:
        raise SizeError("concat_channels: dtype mismatch")
    ca = a.shape[1]
    return result(np.concatenate([a.data, b.data], axis=1), a.dtype, (a, b), "concat",
                  lambda g: (g[:, :ca], g[:, ca:]))


def reduce_mean(t: Tensor) -> Tensor:
    if t.size == 0:
        raise DomainError("mean of an empty tensor")
    n = t.size
    acc = t.dtype.accum
    value = np.asarray(t.data.mean(dtype=acc), dtype=acc)
    shape = t.shape
    return result(value, DType.F64 if acc is np.float64 else DType.F32, (t,), "mean",
                  lambda g: (np.full(shape, g / acc(n), dtype=acc),))


def reduce_sum(t: Tensor) -> Tensor:
    acc = t.dtype.accum
    value = np.asarray(t.data.sum(dtype=acc), dtype=acc)
    shape = t.shape
    return result(value, DType.F64 if acc is np.float64 else DType.F32, (t,), "sum",
                  lambda g: (np.full(shape, g, dtype=acc),))


class Tape:
    """Nodes reachable from a loss, in append order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes
        self.visits = 0

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [loss._node] if loss._node is not None else []
        while stack:
            node = stack.pop()
            if node.id in seen:
                continue
            seen.add(node.id)
            nodes.append(node)
            for p in node.parents:
                if p._node is not None and p._node.id not in seen:
                    stack.append(p._node)
        nodes.sort(key=lambda n: n.id)
        return cls(nodes)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into every tracked leaf's ``grad``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise ContractError("loss is not on the tape")
    tape = Tape.from_loss(loss)
    pending: dict[int, np.ndarray] = {
        loss._node.id: np.ones(loss.shape, dtype=loss.dtype.accum)}
    for node in reversed(tape.nodes):
        g = pending.pop(node.id, None)
        tape.visits += 1
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is not None:
                key = parent._node.id
                pending[key] = pg if key not in pending else pending[key] + pg
            else:
                pg = np.asarray(pg, dtype=parent.dtype.accum).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
    return tape


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` must map an F64 tensor to a scalar tensor.
    """
    if x.dtype is not DType.F64:
        raise ContractError("finite_diff_check needs an F64 input")
    probe = Tensor(x.data.copy(), DType.F64, requires_grad=True)
    backward(f(probe))
    analytic = probe.grad.reshape(-1)
    base = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(base.size):
            plus = base.copy()
            plus[i] += h
            minus = base.copy()
            minus[i] -= h
            fp = f(Tensor(plus.reshape(x.shape), DType.F64)).item()
            fm = f(Tensor(minus.reshape(x.shape), DType.F64)).item()
            numeric = (fp - fm) / (2 * h)
            err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]))
            worst = max(worst, err)
    return worst
