"""Tests for the tensor core and its differentiation."""

import math

import numpy as np
import pytest

from kpconvx.errors import ContractError, DimensionError, EmptyBatchError
from kpconvx.tensorcore import (
    BNState,
    Parameter,
    Tensor,
    add,
    backward,
    batch_norm,
    concat_columns,
    default_dtype,
    elementwise,
    leaky_relu,
    log_softmax,
    matmul,
    mean_all,
    mul,
    no_grad,
    reshape,
    row_gather,
    row_scale,
    scale,
    segment_mean,
    sigmoid,
    softmax,
    sum_all,
)
from kpconvx.tensorcore.counters import OpCounter, counting
from kpconvx.tensorcore.gradcheck import gradcheck, projection_loss


def test_matmul_identity(float64):
    """Test identity times a matrix returns the matrix."""
    out = matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.values, [[3, 4], [5, 6]])
    assert matmul(Tensor([[2.0]]), Tensor([[3.0]])).item() == 6.0


def test_matmul_against_triple_loop(rng, float64):
    """Test matmul on random 5x7 by 7x3 operands against a naive loop."""
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    expected = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).values, expected, atol=1e-12)


def test_matmul_shape_mismatch_reports_shapes():
    """Test a dimension error names both operand shapes."""
    with pytest.raises(DimensionError) as exc:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


def test_elementwise_values(float64):
    """Test leaky relu and sigmoid on simple values."""
    np.testing.assert_allclose(leaky_relu(Tensor([-1.0, 0.0, 2.0]), 0.1).values, [-0.1, 0.0, 2.0])
    assert sigmoid(Tensor([0.0])).item() == 0.5
    big = Parameter([50.0])
    out = sigmoid(big)
    assert out.item() == pytest.approx(1.0)
    backward(sum_all(out))
    assert abs(big.grad[0]) < 1e-12
    np.testing.assert_allclose(elementwise("mul", Tensor([2.0]), Tensor([3.0])).values, [6.0])


def test_elementwise_rejects_non_trailing_broadcast():
    """Test that only trailing-dimension broadcasting is accepted."""
    with pytest.raises(DimensionError):
        add(Tensor(np.zeros((3, 2))), Tensor(np.zeros(3)))
    with pytest.raises(ContractError):
        elementwise("tanh", Tensor([1.0]))


def test_batch_norm_training_hand_case(float64):
    """Test a 2x1 batch [0, 2] normalizes to [-1, 1] and updates running statistics."""
    state = BNState.create(1, momentum=0.1, eps=1e-12)
    out = batch_norm(Tensor([[0.0], [2.0]]), state, training=True)
    np.testing.assert_allclose(out.values, [[-1.0], [1.0]], atol=1e-9)
    np.testing.assert_allclose(state.running_mean, [0.1])
    # unbiased variance 2 blended into the initial 1
    np.testing.assert_allclose(state.running_var, [0.9 + 0.1 * 2.0])


def test_batch_norm_constant_column_and_eval_identity(float64):
    """Test constant input gives the shift and eval mode with unit statistics is the identity."""
    state = BNState.create(2)
    state.shift.values[:] = [0.5, -0.5]
    out = batch_norm(Tensor(np.full((4, 2), 3.0)), state, training=True)
    np.testing.assert_allclose(out.values, np.tile([0.5, -0.5], (4, 1)), atol=1e-9)

    fresh = BNState.create(2, eps=0.0)
    x = np.arange(6.0).reshape(3, 2)
    np.testing.assert_allclose(batch_norm(Tensor(x), fresh, training=False).values, x)


def test_batch_norm_empty_batch():
    """Test an empty batch raises an empty-batch error."""
    with pytest.raises(EmptyBatchError):
        batch_norm(Tensor(np.zeros((0, 3))), BNState.create(3), training=True)


def test_backward_simple_sums(float64):
    """Test gradients of sum(x) and sum(x^2)."""
    x = Parameter(np.ones((2, 3)))
    backward(sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    y = Parameter([1.0, 2.0])
    backward(sum_all(mul(y, y)))
    np.testing.assert_allclose(y.grad, [2.0, 4.0])


def test_backward_accumulates_and_is_linear(float64):
    """Test two backward passes add up and scaling the loss scales the gradient."""
    x = Parameter([1.0, -2.0, 3.0])
    backward(sum_all(mul(x, x)))
    backward(sum_all(mul(x, x)))
    np.testing.assert_allclose(x.grad, 4 * x.values)

    x.zero_grad()
    backward(scale(sum_all(mul(x, x)), 3.0))
    np.testing.assert_allclose(x.grad, 6 * x.values)


def test_backward_requires_scalar():
    """Test a non-scalar loss is rejected."""
    with pytest.raises(ContractError):
        backward(Parameter(np.ones(3)))


@pytest.mark.parametrize(
    "build",
    [
        lambda a, b: matmul(a, b),
        lambda a, b: leaky_relu(matmul(a, b), 0.1),
        lambda a, b: sigmoid(matmul(a, b)),
        lambda a, b: log_softmax(matmul(a, b)),
        lambda a, b: reshape(matmul(a, b), (2, 10)),
        lambda a, b: concat_columns(matmul(a, b), a),
        lambda a, b: segment_mean(matmul(a, b), np.array([1, 3])),
        lambda a, b: row_gather(matmul(a, b), np.array([0, 3, 4, 1, 1])),
        lambda a, b: row_scale(matmul(a, b), np.array([0.0, 2.0, 1.0, 0.5])),
        lambda a, b: mul(matmul(a, b), Tensor(np.linspace(-1, 1, 5))),
        lambda a, b: scale(add(matmul(a, b), Tensor(np.arange(5.0))), -0.5),
    ],
)
def test_operations_match_finite_differences(build):
    """Test every differentiable operation against central differences."""
    with default_dtype("float64"):
        gen = np.random.default_rng(3)
        a = Parameter(gen.standard_normal((4, 3)))
        b = Parameter(gen.standard_normal((3, 5)))
        assert gradcheck(lambda: projection_loss(build(a, b)), [a, b]) < 1e-4


def test_batch_norm_gradients(float64):
    """Test batch norm backward in both modes against central differences."""
    gen = np.random.default_rng(5)
    x = Parameter(gen.standard_normal((6, 4)))
    for training in (True, False):
        state = BNState.create(4)
        state.scale.values[:] = gen.uniform(0.5, 1.5, 4)
        assert gradcheck(lambda: projection_loss(batch_norm(x, state, training)), [x, state.scale, state.shift]) < 1e-4


def test_mean_and_softmax(float64):
    """Test mean reduction and row-wise softmax normalization."""
    assert mean_all(Tensor([[1.0, 2.0], [3.0, 6.0]])).item() == 3.0
    probs = softmax(np.array([[0.0, math.log(3.0)], [1000.0, 0.0]]))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    np.testing.assert_allclose(probs[0], [0.25, 0.75])


def test_no_grad_and_determinism(float64):
    """Test no_grad skips recording and repeated forwards are bitwise equal."""
    gen = np.random.default_rng(11)
    a, b = Parameter(gen.standard_normal((3, 3))), Parameter(gen.standard_normal((3, 2)))
    with no_grad():
        out = matmul(a, b)
    assert not out.requires_grad and out.is_leaf
    assert np.array_equal(sigmoid(matmul(a, b)).values, sigmoid(matmul(a, b)).values)


def test_counters_record_matmul_and_bias(float64):
    """Test operation counters tag matmul and broadcast bias adds."""
    counter = OpCounter(kind="mlp")
    with counting(counter):
        add(matmul(Tensor(np.ones((4, 3))), Tensor(np.ones((3, 2)))), Tensor(np.ones(2)))
    assert counter.counts["matmul"] == 4 * 3 * 2
    assert counter.counts["bias_add"] == 8
    assert counter.total == 32
