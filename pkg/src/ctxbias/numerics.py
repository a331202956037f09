"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs is tracked. Outside a tape every op is a plain numpy
computation, which is what decoding and evaluation use.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MAX_RANK = 3


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(ValueError):
    pass


class VerificationError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, tracked: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = tracked
        t.grad = None
        t.name = None
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __float__(self) -> float:
        return self.item()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside it on tracked tensors are
    appended in execution order, which is already a topological order.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: list[Tape] = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def record(value: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``value`` as the output of an op and record it if needed.

    ``vjp`` maps the output cotangent to one cotangent (or None) per input.
    """
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor._wrap(value, False)
    out = Tensor._wrap(value, True)
    tape.nodes.append(Node(tuple(inputs), out, vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    Leaves are tracked tensors not produced by a node of ``tape``. Existing
    ``.grad`` values are added to, never reset; zero them between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced:
        raise ContractError("loss was not produced on this tape")
    cot: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = cot.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in cot:
                cot[key] = cot[key] + gi
            else:
                cot[key] = gi
            if key not in produced:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = cot[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    return record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return record(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return record(y, (a,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a 0-d tensor."""
    return record(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return record(np.array(a.data.sum() / n), (a,),
                  lambda g: (np.full(a.shape, float(g) / n),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs rank 2, got {a.shape}")
    return record(a.data.T.copy(), (a,), lambda g: (g.T,))


def index(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    out = a.data[idx]

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) for i in parts)

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return record(np.array(out), (a,), vjp)


def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"row id out of range for table with {table.shape[0]} rows")
    return index(table, ids)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, tensors, vjp)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors])
    return record(out, tensors, lambda g: tuple(g[i] for i in range(len(tensors))))


def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    if logits.size == 0 or logits.shape[-1] == 0:
        raise DomainError("softmax of an empty tensor")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record(y, (logits,), vjp)


def log_softmax(logits: Tensor) -> Tensor:
    if logits.size == 0 or logits.shape[-1] == 0:
        raise DomainError("log_softmax of an empty tensor")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return record(y, (logits,), vjp)


def log_sum_exp(values: Tensor) -> Tensor:
    """log(sum(exp(v))) over all entries, as a 0-d tensor."""
    if values.size == 0:
        raise DomainError("log_sum_exp of an empty tensor")
    m = values.data.max()
    if not np.isfinite(m):
        out = np.array(m)
        return record(out, (values,), lambda g: (np.zeros_like(values.data),))
    s = np.exp(values.data - m).sum()
    out = np.array(m + np.log(s))
    return record(out, (values,), lambda g: (g * np.exp(values.data - out),))


def lse(*xs: float) -> float:
    """Scalar log-sum-exp on python floats; -inf entries are allowed."""
    m = max(xs)
    if m == -np.inf:
        return m
    return m + float(np.log(sum(np.exp(x - m) for x in xs)))


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...] | None = None) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape or (fan_in, fan_out))


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6,
                      max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments and reads ``params`` (modified in place while
    probing). At most ``max_coords`` coordinates per parameter are probed,
    sampled with ``rng``; all of them by default.
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    params = list(params)
    saved = [p.grad for p in params]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.grad = None
        p.requires_grad = True
    try:
        with Tape() as tape:
            loss = f()
        if loss.size != 1:
            raise ContractError("finite_diff_check needs a scalar function")
        base = loss.item()
        if tape.nodes and any(n.output is loss for n in tape.nodes):
            backward(tape, loss)
        if f().item() != base:
            raise VerificationError("function is not deterministic across evaluations")
        rng = rng or np.random.default_rng(0)
        worst = 0.0
        for p in params:
            analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1)
            flat = p.data.reshape(-1)
            coords = np.arange(p.size)
            if max_coords is not None and p.size > max_coords:
                coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                denom = max(abs(analytic[i]), abs(numeric), 1e-8)
                worst = max(worst, abs(analytic[i] - numeric) / denom)
        return worst
    finally:
        for p, g, flag in zip(params, saved, flags):
            p.grad = g
            p.requires_grad = flag
