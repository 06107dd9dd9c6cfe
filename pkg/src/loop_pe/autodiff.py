"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. When a :class:`Tape` is active and
at least one operand requires a gradient, the operation is appended to the
tape; :func:`backward` then walks the tape in reverse.

Matrix products accumulate every output entry in ascending index order
(no blocked or parallel reduction), so results are bitwise reproducible and
independent of where a row sits inside the operand.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numba import njit

from .errors import ContractError, DomainError, NonFiniteError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "GradientSet",
    "tensor",
    "constant",
    "matmul",
    "transpose",
    "softmax_rows",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "maximum",
    "neg",
    "relu",
    "tanh",
    "square",
    "reciprocal",
    "reshape",
    "concat",
    "sum_all",
    "max_all",
    "backward",
    "current_tape",
]


@njit(cache=True)
def _matmul_kernel(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]
    return out


def _matmul_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if not a.flags.c_contiguous:
        a = np.ascontiguousarray(a)
    if not b.flags.c_contiguous:
        b = np.ascontiguousarray(b)
    return _matmul_kernel(a, b)


def _all_finite(arr: np.ndarray) -> bool:
    # NaN/Inf propagate into the sum; only an overflowing sum needs the full scan
    return math.isfinite(arr.sum()) or bool(np.isfinite(arr).all())


class Tensor:
    """Immutable n-dimensional array of float64 values.

    Parameters
    ----------
    data : array_like
        Values; copied and converted to float64.
    requires_grad : bool
        Whether :func:`backward` should produce a gradient for this tensor.
    name : str, optional
        Label used in diagnostics and checkpoints.
    """

    __slots__ = ("data", "requires_grad", "name", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not _all_finite(arr):
            raise NonFiniteError(f"tensor {name or ''} holds non-finite values")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t.name = None
        t.node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the values."""
        return np.array(self.data)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return mul(reciprocal(self), other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    """Wrap ``data`` as a tensor that never receives a gradient."""
    if isinstance(data, Tensor):
        return data
    return Tensor(data)


@dataclass
class Node:
    """One recorded primitive: its inputs, output and the rules to recompute it."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward: Callable[..., np.ndarray]
    backward: Callable[..., tuple]
    attrs: dict = field(default_factory=dict)


class Tape:
    """Append-only record of operations, in creation order.

    Use as a context manager; operations executed inside the ``with`` block
    whose operands require gradients are recorded here.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves and return the outputs in tape order."""
        values: dict[int, np.ndarray] = {}
        out = []
        for node in self.nodes:
            args = [values.get(id(t), t.data) for t in node.inputs]
            value = node.forward(*args, **node.attrs)
            values[id(node.output)] = value
            out.append(value)
        return out


_state = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _apply(op: str, forward, backward_fn, inputs: Sequence[Tensor], **attrs) -> Tensor:
    out = forward(*(t.data for t in inputs), **attrs)
    if not _all_finite(out):
        raise NonFiniteError(f"{op} produced non-finite values")
    result = Tensor._wrap(out)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        node = Node(op, tuple(inputs), result, forward, backward_fn, attrs)
        result.node = node
        tape.nodes.append(node)
    return result


def _operand(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.ndim(x) == 0:
        return Tensor(float(x))
    return Tensor(x)


def _check_pair(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ and the second operand is not a scalar")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def _add_f(a, b):
    return a + (b if b.shape == a.shape else b.reshape(()))


def _add_b(g, out, a, b):
    return g, _reduce_to(g, b.shape)


def _sub_f(a, b):
    return a - (b if b.shape == a.shape else b.reshape(()))


def _sub_b(g, out, a, b):
    return g, _reduce_to(-g, b.shape)


def _mul_f(a, b):
    return a * (b if b.shape == a.shape else b.reshape(()))


def _mul_b(g, out, a, b):
    bb = b if b.shape == a.shape else b.reshape(())
    return g * bb, _reduce_to(g * a, b.shape)


def _div_f(a, b):
    return a / (b if b.shape == a.shape else b.reshape(()))


def _div_b(g, out, a, b):
    bb = b if b.shape == a.shape else b.reshape(())
    return g / bb, _reduce_to(-g * a / (bb * bb), b.shape)


def _max_f(a, b):
    return np.maximum(a, b if b.shape == a.shape else b.reshape(()))


def _max_b(g, out, a, b):
    # ties go to the first operand
    take_a = a >= (b if b.shape == a.shape else b.reshape(()))
    return np.where(take_a, g, 0.0), _reduce_to(np.where(take_a, 0.0, g), b.shape)


def add(a, b) -> Tensor:
    a, b = _operand(a), _operand(b)
    _check_pair("add", a, b)
    return _apply("add", _add_f, _add_b, (a, b))


def sub(a, b) -> Tensor:
    a, b = _operand(a), _operand(b)
    _check_pair("sub", a, b)
    return _apply("sub", _sub_f, _sub_b, (a, b))


def mul(a, b) -> Tensor:
    a, b = _operand(a), _operand(b)
    _check_pair("mul", a, b)
    return _apply("mul", _mul_f, _mul_b, (a, b))


def div(a, b) -> Tensor:
    a, b = _operand(a), _operand(b)
    _check_pair("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("div: zero divisor")
    return _apply("div", _div_f, _div_b, (a, b))


def maximum(a, b) -> Tensor:
    """Entrywise max; the subgradient at a tie flows to ``a``."""
    a, b = _operand(a), _operand(b)
    _check_pair("maximum", a, b)
    return _apply("maximum", _max_f, _max_b, (a, b))


def _neg_f(a):
    return -a


def _neg_b(g, out, a):
    return (-g,)


def neg(a) -> Tensor:
    return _apply("neg", _neg_f, _neg_b, (_operand(a),))


def _relu_f(a):
    return np.maximum(a, 0.0)


def _relu_b(g, out, a):
    return (np.where(a >= 0.0, g, 0.0),)


def relu(a) -> Tensor:
    """``max(a, 0)`` with the max tie rule: derivative 1 at exactly zero."""
    return _apply("relu", _relu_f, _relu_b, (_operand(a),))


def _tanh_f(a):
    return np.tanh(a)


def _tanh_b(g, out, a):
    return (g * (1.0 - out * out),)


def tanh(a) -> Tensor:
    return _apply("tanh", _tanh_f, _tanh_b, (_operand(a),))


def _square_f(a):
    return a * a


def _square_b(g, out, a):
    return (2.0 * a * g,)


def square(a) -> Tensor:
    return _apply("square", _square_f, _square_b, (_operand(a),))


def _recip_f(a):
    return 1.0 / a


def _recip_b(g, out, a):
    return (-g * out * out,)


def reciprocal(a) -> Tensor:
    a = _operand(a)
    if np.any(a.data == 0.0):
        raise DomainError("reciprocal: zero divisor")
    return _apply("reciprocal", _recip_f, _recip_b, (a,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "max": maximum,
}

_UNARY = {
    "relu": relu,
    "square": square,
    "neg": neg,
    "tanh": tanh,
    "reciprocal": reciprocal,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an entrywise primitive by name.

    Binary kinds (``add``, ``sub``, ``mul``, ``div``, ``max``) take a second
    operand of equal shape or a scalar; unary kinds (``relu``, ``square``,
    ``neg``, ``tanh``, ``reciprocal``) ignore ``b``.
    """
    if kind in _ELEMENTWISE:
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return _ELEMENTWISE[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ContractError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra


def _matmul_f(a, b):
    return _matmul_array(a, b)


def _matmul_b(g, out, a, b):
    return _matmul_array(g, b.T), _matmul_array(a.T, g)


def matmul(a, b) -> Tensor:
    """Matrix product of an ``m x k`` and a ``k x n`` tensor."""
    a, b = _operand(a), _operand(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    return _apply("matmul", _matmul_f, _matmul_b, (a, b))


def _transpose_f(a):
    return np.ascontiguousarray(a.T)


def _transpose_b(g, out, a):
    return (np.ascontiguousarray(g.T),)


def transpose(a) -> Tensor:
    a = _operand(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    return _apply("transpose", _transpose_f, _transpose_b, (a,))


def _softmax_f(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_b(g, out, z):
    inner = (g * out).sum(axis=1, keepdims=True)
    return (out * (g - inner),)


def softmax_rows(z) -> Tensor:
    """Rowwise softmax with max subtraction."""
    z = _operand(z)
    if z.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got shape {z.shape}")
    return _apply("softmax_rows", _softmax_f, _softmax_b, (z,))


# ---------------------------------------------------------------------------
# structure and reductions


def _reshape_f(a, shape):
    return a.reshape(shape).copy()


def _reshape_b(g, out, a, shape):
    return (g.reshape(a.shape),)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _operand(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _apply("reshape", _reshape_f, _reshape_b, (a,), shape=shape)


def _concat_f(*arrays, axis):
    return np.concatenate(arrays, axis=axis)


def _concat_b(g, out, *arrays, axis):
    bounds = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
    return tuple(np.ascontiguousarray(part) for part in np.split(g, bounds, axis=axis))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_operand(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    for t in tensors:
        if t.ndim != ndim:
            raise ShapeError(f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
        other = [s for i, s in enumerate(t.shape) if i != axis]
        ref = [s for i, s in enumerate(tensors[0].shape) if i != axis]
        if other != ref:
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} disagree off axis {axis}")
    return _apply("concat", _concat_f, _concat_b, tensors, axis=axis)


def _sum_f(a):
    return np.asarray(a.sum())


def _sum_b(g, out, a):
    return (np.full(a.shape, float(g)),)


def sum_all(a) -> Tensor:
    return _apply("sum", _sum_f, _sum_b, (_operand(a),))


def _maxall_f(a):
    return np.asarray(a.max())


def _maxall_b(g, out, a):
    grad = np.zeros(a.size)
    grad[int(np.argmax(a))] = float(g)  # first maximal entry
    return (grad.reshape(a.shape),)


def max_all(a) -> Tensor:
    """Maximum over all entries; the subgradient goes to the first maximal entry."""
    a = _operand(a)
    if a.size == 0:
        raise ShapeError("max_all of an empty tensor")
    return _apply("max", _maxall_f, _maxall_b, (a,))


# ---------------------------------------------------------------------------
# reverse pass


class GradientSet(dict):
    """Mapping from tensors to gradient arrays of identical shape."""

    def __setitem__(self, key: Tensor, value: np.ndarray) -> None:
        if value.shape != key.shape:
            raise ShapeError(f"gradient shape {value.shape} does not match tensor shape {key.shape}")
        super().__setitem__(key, value)

    def by_name(self) -> dict[str, np.ndarray]:
        return {t.name: g for t, g in self.items()}


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> GradientSet:
    """Differentiate a scalar ``loss`` recorded on ``tape``.

    Returns gradients for ``wrt`` (zeros for tensors the loss does not reach)
    or, when ``wrt`` is omitted, for every leaf that requires a gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        parts = node.backward(g, node.output.data, *(t.data for t in node.inputs), **node.attrs)
        for t, part in zip(node.inputs, parts):
            if not t.requires_grad or part is None:
                continue
            if t.node is None:
                leaves[id(t)] = t
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + part
            else:
                grads[key] = np.asarray(part, dtype=np.float64)
    if loss.node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    result = GradientSet()
    targets = list(wrt) if wrt is not None else list(leaves.values())
    for t in targets:
        g = grads.get(id(t))
        result[t] = np.zeros(t.shape) if g is None else g.reshape(t.shape)
    return result
