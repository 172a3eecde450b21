# File: tests/test_diffcore.py
"""
Tests for the reverse-mode differentiation core.

Gradients are checked against central finite differences; tape ordering,
error paths and the Adam optimizer are checked directly.
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np
import pytest

from fedpower.diffcore import (
    AdamState,
    ComputationTape,
    FloatArray,
    Tensor,
    activation,
    adam_step,
    backward,
    elu,
    exp,
    log1p,
    matmul,
    sigmoid_scaled,
    softmax_cross_entropy,
    take,
    tanh,
)
from fedpower.errors import ConfigError, LabelError, NumericError, ShapeError, StateError


def numeric_grad(f: Callable[[FloatArray], float], x: FloatArray, h: float = 1e-5) -> FloatArray:
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (f(up) - f(down)) / (2 * h)
    return grad


def assert_grad_close(analytic: FloatArray, numeric: FloatArray, tol: float = 1e-4) -> None:
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.abs(analytic - numeric) / np.maximum(scale, 1e-6)
    assert rel.max() < tol, rel.max()


def test_sum_of_products_gradient() -> None:
    """d/dx sum(x * y) = y and d/dy = x."""
    x = Tensor.parameter([1.0, 2.0, 3.0])
    y = Tensor.parameter([4.0, 5.0, 6.0])
    gx, gy = backward((x * y).sum(), [x, y])
    np.testing.assert_array_equal(gx, [4.0, 5.0, 6.0])
    np.testing.assert_array_equal(gy, [1.0, 2.0, 3.0])
    assert x.grad is gx


def test_gradients_are_linear_in_the_loss() -> None:
    """grad(a*f + b*g) = a*grad(f) + b*grad(g)."""
    rng = np.random.default_rng(0)
    values = rng.normal(size=(3, 4))

    def grad_of(build: Callable[[Tensor], Tensor]) -> FloatArray:
        w = Tensor.parameter(values)
        return backward(build(w), [w])[0]

    f = grad_of(lambda w: tanh(w).sum())
    g = grad_of(lambda w: exp(w * 0.5).sum())
    combined = grad_of(lambda w: tanh(w).sum() * 2.0 + exp(w * 0.5).sum() * -3.0)
    np.testing.assert_allclose(combined, 2.0 * f - 3.0 * g, rtol=1e-12, atol=1e-12)


def test_broadcast_add_reduces_gradient() -> None:
    """A bias broadcast over rows gets the row-summed gradient."""
    x = Tensor.constant(np.ones((5, 3)))
    b = Tensor.parameter(np.zeros(3))
    (gb,) = backward((x + b).sum(), [b])
    np.testing.assert_array_equal(gb, [5.0, 5.0, 5.0])


def test_reused_input_accumulates() -> None:
    """x used twice receives both contributions."""
    x = Tensor.parameter(3.0)
    (gx,) = backward(x * x + x, [x])
    assert gx == pytest.approx(7.0)


@pytest.mark.parametrize("seed", range(5))
def test_batched_matmul_chain_matches_finite_differences(seed: int) -> None:
    """A (b, L, L) @ (b, L, d) @ (d, k) chain with ELU matches finite differences."""
    rng = np.random.default_rng(seed)
    A = rng.uniform(size=(2, 4, 4))
    z = rng.normal(size=(2, 4, 3))
    w0 = rng.normal(size=(3, 2))

    def loss_value(w: FloatArray) -> float:
        out = elu(matmul(A, matmul(Tensor.constant(z), Tensor.constant(w))))
        return float((out * out).sum().item())

    w = Tensor.parameter(w0)
    out = elu(matmul(A, matmul(Tensor.constant(z), w)))
    (g,) = backward((out * out).sum(), [w])
    assert_grad_close(g, numeric_grad(loss_value, w0))


@pytest.mark.parametrize("seed", range(5))
def test_elementwise_ops_match_finite_differences(seed: int) -> None:
    """div, log1p, sigmoid_scaled, take and mean agree with finite differences."""
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0.5, 2.0, size=(3, 2))

    def build(x: Tensor) -> Tensor:
        s = sigmoid_scaled(x, 2.5)
        mixed = log1p(s) / (x + 1.0) - take(x, 1, axis=-1).mean()
        return mixed.mean()

    x = Tensor.parameter(x0)
    (g,) = backward(build(x), [x])
    numeric = numeric_grad(lambda v: build(Tensor.constant(v)).item(), x0)
    assert_grad_close(g, numeric)


@pytest.mark.parametrize("seed", range(3))
def test_cross_entropy_matches_finite_differences(seed: int) -> None:
    """Softmax cross-entropy gradient agrees with finite differences."""
    rng = np.random.default_rng(seed)
    logits0 = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    t = Tensor.parameter(logits0)
    (g,) = backward(softmax_cross_entropy(t, labels), [t])
    numeric = numeric_grad(
        lambda v: softmax_cross_entropy(Tensor.constant(v), labels).item(), logits0
    )
    assert_grad_close(g, numeric)


def test_cross_entropy_of_uniform_logits() -> None:
    """Equal logits over C classes give a loss of log C."""
    loss = softmax_cross_entropy(Tensor.constant(np.zeros((3, 10))), [0, 5, 9])
    assert loss.item() == pytest.approx(np.log(10.0))


def test_cross_entropy_rejects_bad_labels() -> None:
    """Labels outside [0, C) raise LabelError."""
    with pytest.raises(LabelError):
        softmax_cross_entropy(Tensor.constant(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ShapeError):
        softmax_cross_entropy(Tensor.constant(np.zeros(3)), [0])


def test_sigmoid_scaled_is_bounded_and_stable() -> None:
    """Large inputs saturate without overflow and stay inside [0, scale]."""
    out = sigmoid_scaled(Tensor.constant([-1000.0, 0.0, 1000.0]), 0.01).values
    assert out[0] == 0.0
    assert out[1] == pytest.approx(0.005)
    assert out[2] == pytest.approx(0.01)
    with pytest.raises(ConfigError):
        sigmoid_scaled(Tensor.constant([0.0]), 0.0)


def test_activation_dispatch_and_non_finite_input() -> None:
    """activation() routes by name; NaN input raises NumericError."""
    x = Tensor.constant([-1.0, 2.0])
    np.testing.assert_allclose(activation(x, "tanh").values, np.tanh([-1.0, 2.0]))
    np.testing.assert_allclose(activation(x, "elu").values, [np.expm1(-1.0), 2.0])
    with pytest.raises(NumericError):
        elu(Tensor.constant([np.nan]))
    with pytest.raises(ConfigError):
        activation(x, "relu")  # type: ignore[arg-type]


def test_matmul_shape_mismatch_names_shapes() -> None:
    """An inner dimension mismatch reports both shapes."""
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor.constant(np.ones((2, 3))), Tensor.constant(np.ones((2, 3))))


def test_backward_error_paths() -> None:
    """Non-scalar losses and untracked tensors are rejected."""
    with pytest.raises(ShapeError):
        backward(Tensor.parameter([1.0, 2.0]) * 2.0)
    with pytest.raises(StateError):
        backward(Tensor.constant(1.0))


def test_unreached_parameter_gets_zero_gradient() -> None:
    """A parameter the loss does not use receives zeros."""
    used = Tensor.parameter([1.0])
    unused = Tensor.parameter([[1.0, 2.0]])
    grads = backward((used * 2.0).sum(), [used, unused])
    np.testing.assert_array_equal(grads[1], np.zeros((1, 2)))


def test_tape_is_in_creation_order() -> None:
    """The traced tape lists operations in the order they ran."""
    x = Tensor.parameter([1.0, 2.0])
    y = exp(x)
    z = (y * 3.0).sum()
    tape = ComputationTape.trace(z)
    assert tape.names() == ["exp", "mul", "sum"]
    assert len(tape) == 3
    assert [r.output for r in tape][-1] is z


def test_constant_only_ops_are_not_recorded() -> None:
    """Operations on constants produce leaves."""
    out = Tensor.constant([1.0]) * 2.0
    assert out.is_leaf
    assert out.values.flags.writeable is False


def test_adam_first_step_moves_by_lr() -> None:
    """The first bias-corrected Adam step moves each entry by about lr."""
    params = [np.array([1.0, -1.0])]
    grads = [np.array([0.5, -2.0])]
    updated, state = adam_step(params, grads, AdamState(), lr=0.1)
    np.testing.assert_allclose(updated[0], [0.9, -0.9], atol=1e-6)
    assert state.step == 1
    np.testing.assert_array_equal(params[0], [1.0, -1.0])


def test_adam_minimizes_quadratic() -> None:
    """Adam drives a quadratic to its minimum."""
    w = [np.array([3.0, -2.0])]
    state = AdamState()
    for _ in range(2000):
        w, state = adam_step(w, [2.0 * (w[0] - 1.0)], state, lr=0.05)
    np.testing.assert_allclose(w[0], [1.0, 1.0], atol=1e-2)


def test_adam_rejects_bad_input() -> None:
    """Non-positive learning rates and shape mismatches raise."""
    with pytest.raises(ConfigError):
        adam_step([np.zeros(2)], [np.zeros(2)], AdamState(), lr=0.0)
    with pytest.raises(ShapeError):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState(), lr=0.1)
