# File: src/fedpower/diffcore.py
"""
Dense float64 tensors with reverse-mode gradients.

Every operation records one node holding its inputs and an explicit reverse
rule. A backward pass traces the nodes reachable from a scalar output into a
ComputationTape (creation order, which is a topological order) and replays it
in reverse. Leading batch dimensions follow numpy broadcasting, so a stack of
channel realizations runs through a single tape.
"""

from __future__ import annotations

import itertools
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field
from typing import Literal, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ConfigError, LabelError, NumericError, ShapeError, StateError

__all__ = [
    "FloatArray",
    "Tensor",
    "ComputationTape",
    "AdamState",
    "apply_op",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log1p",
    "tensor_sum",
    "tensor_mean",
    "reshape",
    "take",
    "elu",
    "tanh",
    "sigmoid_scaled",
    "activation",
    "softmax_cross_entropy",
    "backward",
    "adam_step",
]

FloatArray = NDArray[np.float64]
Operand = Union["Tensor", ArrayLike]
ReverseRule = Callable[[FloatArray], Sequence[Union[FloatArray, None]]]
ActivationKind = Literal["elu", "sigmoid_scaled", "tanh"]

# Monotone creation stamps; sorting recorded nodes by stamp yields a
# topological order because an output is always created after its inputs.
_STAMPS = itertools.count()


@dataclass(frozen=True, eq=False)
class _Record:
    stamp: int
    output: Tensor
    inputs: tuple[Tensor, ...]
    reverse: ReverseRule
    name: str


class Tensor:
    """Immutable float64 array with an optional gradient buffer.

    Leaves created with ``requires_grad=True`` are trainable: a backward pass
    writes ``d loss / d leaf`` into their ``grad``. Tensors produced by an
    operation on at least one tracked input carry the record of that
    operation.
    """

    __slots__ = ("_values", "grad", "requires_grad", "_record", "_tracked")

    # Make ndarray <op> Tensor dispatch to the reflected Tensor operators.
    __array_ufunc__ = None

    def __init__(self, values: ArrayLike, requires_grad: bool = False) -> None:
        array = np.array(values, dtype=np.float64)
        array.flags.writeable = False
        self._values: FloatArray = array
        self.grad: FloatArray | None = None
        self.requires_grad = requires_grad
        self._record: _Record | None = None
        self._tracked = requires_grad

    @classmethod
    def constant(cls, values: ArrayLike) -> Tensor:
        return cls(values, requires_grad=False)

    @classmethod
    def parameter(cls, values: ArrayLike) -> Tensor:
        return cls(values, requires_grad=True)

    @property
    def values(self) -> FloatArray:
        return self._values

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(d) for d in self._values.shape)

    @property
    def ndim(self) -> int:
        return int(self._values.ndim)

    @property
    def size(self) -> int:
        return int(self._values.size)

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self._values.reshape(-1)[0])

    def numpy(self) -> FloatArray:
        """Return a writable copy of the values."""
        return np.array(self._values, dtype=np.float64)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: Operand) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Operand) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Operand) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Operand) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Operand) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Operand) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Operand) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Operand) -> Tensor:
        return matmul(self, other)

    def __rmatmul__(self, other: Operand) -> Tensor:
        return matmul(other, self)

    def sum(self, axis: int | None = None) -> Tensor:
        return tensor_sum(self, axis)

    def mean(self, axis: int | None = None) -> Tensor:
        return tensor_mean(self, axis)

    def reshape(self, *shape: int) -> Tensor:
        return reshape(self, shape)


def _as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor.constant(value)


def _unbroadcast(grad: FloatArray, shape: tuple[int, ...]) -> FloatArray:
    """Sum ``grad`` over the axes that broadcasting expanded from ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def apply_op(
    name: str,
    values: ArrayLike,
    inputs: Sequence[Tensor],
    reverse: ReverseRule,
) -> Tensor:
    """Create the output tensor of an operation and record its reverse rule.

    Args:
        name: Operation name, kept on the record for debugging.
        values: Forward result.
        inputs: Operand tensors, in the order ``reverse`` returns gradients.
        reverse: Maps the output gradient to one gradient (or None) per input.
            Gradients may have the broadcast shape; they are reduced to each
            input's shape during the backward pass.

    Returns:
        The output tensor. It is recorded only when some input is tracked.
    """
    out = Tensor(values)
    if any(t._tracked for t in inputs):
        out._tracked = True
        out._record = _Record(next(_STAMPS), out, tuple(inputs), reverse, name)
    return out


def add(a: Operand, b: Operand) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)
    return apply_op("add", ta.values + tb.values, (ta, tb), lambda g: (g, g))


def sub(a: Operand, b: Operand) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)
    return apply_op("sub", ta.values - tb.values, (ta, tb), lambda g: (g, -g))


def mul(a: Operand, b: Operand) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)
    return apply_op(
        "mul",
        ta.values * tb.values,
        (ta, tb),
        lambda g: (g * tb.values, g * ta.values),
    )


def div(a: Operand, b: Operand) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)
    out = ta.values / tb.values
    return apply_op(
        "div",
        out,
        (ta, tb),
        lambda g: (g / tb.values, -g * out / tb.values),
    )


def neg(a: Operand) -> Tensor:
    ta = _as_tensor(a)
    return apply_op("neg", -ta.values, (ta,), lambda g: (-g,))


def matmul(a: Operand, b: Operand) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    Raises:
        ShapeError: If either operand has fewer than two axes or the inner
            dimensions disagree.
    """
    ta, tb = _as_tensor(a), _as_tensor(b)
    if ta.ndim < 2 or tb.ndim < 2 or ta.shape[-1] != tb.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {ta.shape} @ {tb.shape}")
    av, bv = ta.values, tb.values
    return apply_op(
        "matmul",
        np.matmul(av, bv),
        (ta, tb),
        lambda g: (
            np.matmul(g, np.swapaxes(bv, -1, -2)),
            np.matmul(np.swapaxes(av, -1, -2), g),
        ),
    )


def exp(a: Operand) -> Tensor:
    ta = _as_tensor(a)
    out = np.exp(ta.values)
    return apply_op("exp", out, (ta,), lambda g: (g * out,))


def log1p(a: Operand) -> Tensor:
    ta = _as_tensor(a)
    return apply_op(
        "log1p", np.log1p(ta.values), (ta,), lambda g: (g / (1.0 + ta.values),)
    )


def tensor_sum(a: Operand, axis: int | None = None) -> Tensor:
    ta = _as_tensor(a)
    shape = ta.shape

    def reverse(g: FloatArray) -> tuple[FloatArray]:
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return apply_op("sum", ta.values.sum(axis=axis), (ta,), reverse)


def tensor_mean(a: Operand, axis: int | None = None) -> Tensor:
    ta = _as_tensor(a)
    count = ta.size if axis is None else ta.shape[axis]
    return mul(tensor_sum(ta, axis), 1.0 / count)


def reshape(a: Operand, shape: Sequence[int]) -> Tensor:
    ta = _as_tensor(a)
    original = ta.shape
    return apply_op(
        "reshape",
        ta.values.reshape(tuple(shape)),
        (ta,),
        lambda g: (g.reshape(original),),
    )


def take(a: Operand, index: int, axis: int = -1) -> Tensor:
    """Select one slice along ``axis`` (the axis is dropped)."""
    ta = _as_tensor(a)
    shape = ta.shape

    def reverse(g: FloatArray) -> tuple[FloatArray]:
        full = np.zeros(shape, dtype=np.float64)
        np.moveaxis(full, axis, 0)[index] = g
        return (full,)

    return apply_op("take", np.take(ta.values, index, axis=axis), (ta,), reverse)


def _require_finite(t: Tensor, op: str) -> None:
    if not np.all(np.isfinite(t.values)):
        raise NumericError(f"{op}: non-finite input")


def elu(a: Operand) -> Tensor:
    """ELU with alpha fixed at 1."""
    ta = _as_tensor(a)
    _require_finite(ta, "elu")
    x = ta.values
    negative = np.expm1(np.minimum(x, 0.0))
    out = np.where(x >= 0.0, x, negative)
    slope = np.where(x >= 0.0, 1.0, negative + 1.0)
    return apply_op("elu", out, (ta,), lambda g: (g * slope,))


def tanh(a: Operand) -> Tensor:
    ta = _as_tensor(a)
    _require_finite(ta, "tanh")
    out = np.tanh(ta.values)
    return apply_op("tanh", out, (ta,), lambda g: (g * (1.0 - out * out),))


def sigmoid_scaled(a: Operand, scale: float) -> Tensor:
    """``scale / (1 + exp(-x))``, evaluated without overflow."""
    if not scale > 0.0:
        raise ConfigError(f"sigmoid scale must be positive, got {scale}")
    ta = _as_tensor(a)
    _require_finite(ta, "sigmoid_scaled")
    x = ta.values
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    return apply_op(
        "sigmoid_scaled",
        scale * s,
        (ta,),
        lambda g: (g * scale * s * (1.0 - s),),
    )


def activation(a: Operand, kind: ActivationKind, scale: float = 1.0) -> Tensor:
    """Dispatch to one of the supported elementwise activations."""
    if kind == "elu":
        return elu(a)
    if kind == "tanh":
        return tanh(a)
    if kind == "sigmoid_scaled":
        return sigmoid_scaled(a, scale)
    raise ConfigError(f"unknown activation {kind!r}")


def softmax_cross_entropy(logits: Operand, labels: ArrayLike) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    Args:
        logits: Tensor of shape (n, C).
        labels: n class indices in [0, C).

    Returns:
        Scalar tensor.

    Raises:
        ShapeError: If logits is not 2-D or the label count differs from n.
        LabelError: If a label lies outside [0, C).
    """
    tl = _as_tensor(logits)
    if tl.ndim != 2:
        raise ShapeError(f"logits must be (n, C), got {tl.shape}")
    n, classes = tl.shape
    idx = np.asarray(labels).astype(np.int64).reshape(-1)
    if idx.shape[0] != n:
        raise ShapeError(f"{idx.shape[0]} labels for {n} logit rows")
    if idx.size and (idx.min() < 0 or idx.max() >= classes):
        raise LabelError(f"labels must lie in [0, {classes})")

    shifted = tl.values - tl.values.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, idx]))
    probs = np.exp(shifted - log_norm[:, None])

    def reverse(g: FloatArray) -> tuple[FloatArray]:
        delta = probs.copy()
        delta[rows, idx] -= 1.0
        return (g * delta / n,)

    return apply_op("softmax_cross_entropy", loss, (tl,), reverse)


class ComputationTape:
    """Recorded operations reachable from one output, in creation order."""

    def __init__(self, records: Sequence[_Record]) -> None:
        self._records = sorted(records, key=lambda r: r.stamp)

    @classmethod
    def trace(cls, output: Tensor) -> ComputationTape:
        seen: set[int] = set()
        found: list[_Record] = []
        stack = [output]
        while stack:
            node = stack.pop()
            record = node._record
            if record is None or id(record) in seen:
                continue
            seen.add(id(record))
            found.append(record)
            stack.extend(t for t in record.inputs if t._tracked)
        return cls(found)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[_Record]:
        return iter(self._records)

    def names(self) -> list[str]:
        return [r.name for r in self._records]

    def replay(self, output: Tensor) -> dict[int, tuple[Tensor, FloatArray]]:
        """Propagate d output / d output = 1 backwards through the tape.

        Returns:
            Mapping from ``id(leaf)`` to ``(leaf, gradient)`` for every
            trainable leaf the output depends on.
        """
        pending: dict[int, FloatArray] = {id(output): np.ones(output.shape)}
        leaves: dict[int, tuple[Tensor, FloatArray]] = {}
        for record in reversed(self._records):
            g = pending.pop(id(record.output), None)
            if g is None:
                continue
            for inp, ig in zip(record.inputs, record.reverse(g)):
                if ig is None or not inp._tracked:
                    continue
                ig = _unbroadcast(np.asarray(ig, dtype=np.float64), inp.shape)
                if inp._record is None:
                    prev = leaves.get(id(inp))
                    leaves[id(inp)] = (inp, ig if prev is None else prev[1] + ig)
                else:
                    prev_g = pending.get(id(inp))
                    pending[id(inp)] = ig if prev_g is None else prev_g + ig
        return leaves


def backward(
    loss: Tensor, parameters: Sequence[Tensor] | None = None
) -> list[FloatArray]:
    """Compute gradients of a scalar loss.

    Each trainable leaf reached from ``loss`` gets its ``grad`` overwritten.

    Args:
        loss: Single-element tensor produced by recorded operations.
        parameters: Tensors whose gradients are returned, in order. Tensors
            the loss does not depend on receive zeros. When omitted, the
            gradients of all reached trainable leaves are returned in creation
            order.

    Raises:
        ShapeError: If ``loss`` has more than one element.
        StateError: If ``loss`` was not produced by a recorded operation.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._record is None:
        raise StateError(
            "backward called on a tensor with no recorded forward operation"
        )
    leaves = ComputationTape.trace(loss).replay(loss)
    for leaf, grad in leaves.values():
        leaf.grad = grad
    if parameters is None:
        return [grad for _, grad in leaves.values()]
    out: list[FloatArray] = []
    for p in parameters:
        hit = leaves.get(id(p))
        if hit is None:
            p.grad = np.zeros(p.shape)
            out.append(p.grad)
        else:
            out.append(hit[1])
    return out


@dataclass
class AdamState:
    """First/second moment estimates and step counter for Adam."""

    first: list[FloatArray] = field(default_factory=lambda: [])
    second: list[FloatArray] = field(default_factory=lambda: [])
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[FloatArray]) -> AdamState:
        return cls(
            first=[np.zeros_like(p, dtype=np.float64) for p in params],
            second=[np.zeros_like(p, dtype=np.float64) for p in params],
        )


def adam_step(
    params: Sequence[FloatArray],
    grads: Sequence[FloatArray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[list[FloatArray], AdamState]:
    """One bias-corrected Adam descent step.

    Returns:
        New parameter arrays and the (updated in place) state.

    Raises:
        ConfigError: If ``lr`` is not positive.
        ShapeError: If params, grads and state disagree.
    """
    if not lr > 0.0:
        raise ConfigError(f"Adam learning rate must be positive, got {lr}")
    if not state.first:
        fresh = AdamState.zeros_like(params)
        state.first, state.second = fresh.first, fresh.second
    if not (len(params) == len(grads) == len(state.first) == len(state.second)):
        raise ShapeError("Adam params, grads and state have different lengths")

    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t
    updated: list[FloatArray] = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.first[i].shape:
            raise ShapeError(f"Adam shape mismatch: {p.shape} vs {g.shape}")
        state.first[i] = beta1 * state.first[i] + (1.0 - beta1) * g
        state.second[i] = beta2 * state.second[i] + (1.0 - beta2) * g * g
        m_hat = state.first[i] / correction1
        v_hat = state.second[i] / correction2
        updated.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return updated, state
