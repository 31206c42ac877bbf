"""
Reverse-mode automatic differentiation over dense float64 arrays.

The graph is built define-by-run: every op on a tensor that requires a
gradient records a TapeRecord on its output. `backward` orders the recorded
operations topologically (the Tape) and walks them in reverse, accumulating
gradients into the leaf tensors.

Only scalar-times-tensor broadcasting is supported; binary elementwise ops
require equal shapes.
"""

import itertools
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import ContractError, DimensionError, DomainError, InputError

Shape = Tuple[int, ...]
BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_ids = itertools.count()


@dataclass(eq=False)
class TapeRecord:
    """One recorded operation: its inputs, output id and backward rule."""

    op: str
    inputs: Tuple["Tensor", ...]
    output_id: int
    backward: BackwardRule

    @property
    def input_ids(self) -> Tuple[int, ...]:
        return tuple(t.id for t in self.inputs)


class Tensor:
    """Dense n-dimensional float64 array with a lazily allocated gradient."""

    __slots__ = ("values", "grad", "requires_grad", "id", "_record")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self._record: Optional[TapeRecord] = None

    @classmethod
    def zeros(cls, shape: Sequence[int], requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(tuple(shape)), requires_grad=requires_grad)

    @property
    def shape(self) -> Shape:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self) -> "Tensor":
        return reduce_mean(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Tape:
    """Recorded operations reachable from a root, in topological order."""

    nodes: List[Tensor] = field(default_factory=list)

    @property
    def records(self) -> List[TapeRecord]:
        return [n._record for n in self.nodes if n._record is not None]

    @classmethod
    def build(cls, root: Tensor) -> "Tape":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in visited:
                continue
            visited.add(node.id)
            stack.append((node, True))
            if node._record is not None:
                for parent in node._record.inputs:
                    if parent.requires_grad and parent.id not in visited:
                        stack.append((parent, False))
        return cls(nodes=order)


def backward(loss: Tensor) -> None:
    """Populate `.grad` of every requires_grad tensor reachable from `loss`.

    Leaf gradients accumulate across calls; intermediate tensors hold the
    gradient of the latest pass only.
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a loss that does not depend on any trainable tensor")

    tape = Tape.build(loss)
    pending = {loss.id: np.ones(())}
    for node in reversed(tape.nodes):
        g = pending.pop(node.id, None)
        if g is None:
            continue
        if node._record is None:
            node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._record.inputs, node._record.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pending[parent.id] = pending[parent.id] + pg if parent.id in pending else pg


def _result(op: str, values: np.ndarray, inputs: Tuple[Tensor, ...], rule: BackwardRule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.id = next(_ids)
    out.requires_grad = any(t.requires_grad for t in inputs)
    out._record = TapeRecord(op, inputs, out.id, rule) if out.requires_grad else None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(op, a.shape, b.shape)


def detach(a: Tensor) -> Tensor:
    """Copy of `a` cut off from the tape."""
    return Tensor(a.values, requires_grad=False)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    av, bv = a.values, b.values
    return _result("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result("add", a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result("sub", a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _result("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    av, bv = a.values, b.values
    if np.any(bv == 0.0):
        raise DomainError("div: division by zero")
    return _result("div", av / bv, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", a.values * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.values, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0.0
    return _result("relu", np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.values)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp: overflow; shift the input before exponentiating")
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.values
    if np.any(av <= 0.0):
        raise DomainError("log: input must be strictly positive; shift or clamp it explicitly")
    return _result("log", np.log(av), (a,), lambda g: (g / av,))


def sqrt(a: Tensor) -> Tensor:
    av = a.values
    if np.any(av < 0.0):
        raise DomainError("sqrt: input must be non-negative")
    out = np.sqrt(av)

    def rule(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, 0.5 * g / safe, 0.0),)

    return _result("sqrt", out, (a,), rule)


def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _result("sum", np.array(a.values.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))
    if not -a.values.ndim <= axis < a.values.ndim:
        raise DimensionError(f"sum(axis={axis})", shape)

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _result("sum", a.values.sum(axis=axis), (a,), rule)


def reduce_mean(a: Tensor) -> Tensor:
    if a.values.size == 0:
        raise ContractError("mean of an empty tensor")
    shape, n = a.shape, a.values.size
    return _result("mean", np.array(a.values.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    try:
        out = a.values.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError("reshape", original, tuple(shape)) from exc
    return _result("reshape", out, (a,), lambda g: (g.reshape(original),))


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise DimensionError("transpose", a.shape)
    return _result("transpose", a.values.T, (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-D tensors."""
    if not parts:
        raise ContractError("concat needs at least one tensor")
    for p in parts:
        if p.values.ndim != 1:
            raise DimensionError("concat", p.shape)
    bounds = np.cumsum([p.shape[0] for p in parts])[:-1]
    return _result("concat", np.concatenate([p.values for p in parts]), tuple(parts),
                   lambda g: tuple(np.split(g, bounds)))


def stack_columns(columns: Sequence[Tensor]) -> Tensor:
    """Stack k tensors of shape [B] into a [B x k] tensor."""
    if not columns:
        raise ContractError("stack_columns needs at least one column")
    first = columns[0].shape
    for c in columns:
        if c.values.ndim != 1 or c.shape != first:
            raise DimensionError("stack_columns", first, c.shape)
    k = len(columns)
    return _result("stack_columns", np.stack([c.values for c in columns], axis=1), tuple(columns),
                   lambda g: tuple(g[:, j] for j in range(k)))


def pick(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Select one entry per row: out[i] = a[i, indices[i]]."""
    if a.values.ndim != 2 or len(indices) != a.shape[0]:
        raise DimensionError("pick", a.shape, (len(indices),))
    idx = np.asarray(indices, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= a.shape[1]):
        raise InputError(f"pick: index out of range [0, {a.shape[1]})")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return _result("pick", a.values[rows, idx], (a,), rule)


def logsumexp_rows(a: Tensor) -> Tensor:
    """Max-shifted log(sum(exp(a[i, :]))) for every row."""
    if a.values.ndim != 2 or a.shape[1] == 0:
        raise DimensionError("logsumexp_rows", a.shape)
    m = a.values.max(axis=1, keepdims=True)
    e = np.exp(a.values - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    softmax = e / s
    return _result("logsumexp_rows", out, (a,), lambda g: (g[:, None] * softmax,))


def log1p_sum_exp_rows(a: Tensor) -> Tensor:
    """Stable log(1 + sum_j exp(a[i, j])) for every row.

    Rows whose entries are all non-positive go through log1p so the tail
    keeps full relative precision; otherwise the row maximum is factored out.
    """
    if a.values.ndim != 2 or a.shape[1] == 0:
        raise DimensionError("log1p_sum_exp_rows", a.shape)
    av = a.values
    m = np.maximum(av.max(axis=1), 0.0)
    shifted = np.exp(av - m[:, None])
    s = np.exp(-m) + shifted.sum(axis=1)
    out = np.where(m == 0.0, np.log1p(shifted.sum(axis=1)), m + np.log(s))
    weights = shifted / s[:, None]
    return _result("log1p_sum_exp_rows", out, (a,), lambda g: (g[:, None] * weights,))


def row_norm(a: Tensor, eps: float) -> Tensor:
    """Euclidean norm of every row, floored at `eps`."""
    if a.values.ndim != 2:
        raise DimensionError("row_norm", a.shape)
    av = a.values
    n = np.sqrt((av * av).sum(axis=1))
    out = np.maximum(n, eps)
    live = n > eps
    safe = np.where(live, n, 1.0)

    def rule(g):
        return (np.where(live, g / safe, 0.0)[:, None] * av,)

    return _result("row_norm", out, (a,), rule)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.values >= lo) & (a.values <= hi)
    return _result("clip", np.clip(a.values, lo, hi), (a,), lambda g: (g * inside,))


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar `fn()` w.r.t. `tensor`."""
    grad = np.zeros_like(tensor.values)
    flat = tensor.values.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = fn().item()
        flat[i] = original - step
        minus = fn().item()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * step)
    return grad
