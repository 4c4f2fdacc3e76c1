import math

import numpy as np
import pytest

from numerics import (
    AdamState,
    DimensionError,
    Parameter,
    Precision,
    Tensor,
    _result,
    adam_step,
    backward,
    concat,
    cosine_similarity_matrix,
    finite_difference_check,
    gather,
    layer_norm,
    max_over_axis,
    row_softmax,
    take_rows,
    unbroadcast,
    zero_grad,
)


def param(value, name="x"):
    return Parameter(name, value, dtype=np.float64)


def test_matmul_values():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ a).data, a.data)
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(np.zeros((2, 3)))).data, np.zeros((2, 3)))
    assert np.array_equal((a @ Tensor([[5.0], [6.0]])).data, [[17.0], [39.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_elementwise_values():
    assert np.array_equal(Tensor([-1.0, 0.0, 2.0]).relu().data, [0.0, 0.0, 2.0])
    assert Tensor([0.0]).sigmoid().data[0] == pytest.approx(0.5)
    assert Tensor([0.0]).tanh().data[0] == 0.0


def test_sigmoid_saturates_without_overflow():
    with np.errstate(over="raise"):
        y = Tensor([-1000.0, 1000.0]).sigmoid().data
    assert y[0] == pytest.approx(0.0) and y[1] == pytest.approx(1.0)


def test_relu_gradient_at_zero_is_zero(f64):
    x = param([0.0, 1.0, -1.0])
    backward(x.relu().sum())
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_row_softmax_values():
    assert np.allclose(row_softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    assert np.allclose(row_softmax(Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])
    assert np.allclose(row_softmax(Tensor([[0.0, math.log(3)]], dtype=np.float64)).data, [[0.25, 0.75]])


def test_layer_norm_values(f64):
    ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
    assert np.array_equal(layer_norm(Tensor([[3.0, 3.0]]), ones, zeros).data, [[0.0, 0.0]])
    assert np.allclose(layer_norm(Tensor([[-1.0, 1.0]]), ones, zeros, eps=0.0).data, [[-1.0, 1.0]])
    bias = Tensor([0.5, -2.0])
    out = layer_norm(Tensor(np.random.default_rng(0).normal(size=(3, 2))), Tensor(np.zeros(2)), bias)
    assert np.array_equal(out.data, np.tile([0.5, -2.0], (3, 1)))


def test_max_over_axis_first_occurrence():
    values, index = max_over_axis(Tensor([[1.0, 3.0, 2.0], [2.0, 2.0, 0.0], [-5.0, -7.0, -6.0]]))
    assert np.array_equal(values.data, [3.0, 2.0, -5.0])
    assert np.array_equal(index, [1, 0, 0])


def test_max_over_axis_routes_gradient_to_argmax(f64):
    x = param([[1.0, 3.0, 3.0]])
    values, _ = max_over_axis(x, axis=1)
    backward(values.sum())
    assert np.array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_max_over_axis_empty_axis():
    with pytest.raises(DimensionError):
        max_over_axis(Tensor(np.zeros((2, 0))), axis=1)


def test_cosine_values():
    assert cosine_similarity_matrix(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0]])).data[0, 0] == pytest.approx(1.0)
    assert cosine_similarity_matrix(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])).data[0, 0] == 0.0
    assert cosine_similarity_matrix(Tensor([[1.0, 1.0]]), Tensor([[1.0, 0.0]])).data[0, 0] == pytest.approx(
        0.70710678, abs=1e-7
    )


def test_cosine_bounded_and_zero_vector_safe(f64, rng):
    a = param(np.vstack([np.zeros(4), rng.normal(size=(5, 4))]), "a")
    b = param(rng.normal(size=(7, 4)), "b")
    cos = cosine_similarity_matrix(a, b)
    assert np.all(np.abs(cos.data) <= 1 + 1e-6)
    assert np.array_equal(cos.data[0], np.zeros(7))
    backward(cos.sum())
    assert np.all(np.isfinite(a.grad)) and np.all(np.isfinite(b.grad))


def test_backward_sum_gives_ones(f64):
    x = param(np.arange(6.0).reshape(2, 3))
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_square(f64):
    x = param([3.0])
    backward((x * x).sum())
    assert np.array_equal(x.grad, [6.0])


def test_backward_accumulates_reused_inputs(f64):
    x = param([[1.0, 2.0]])
    y = x + x
    backward((y * x).sum())
    assert np.allclose(x.grad, 4 * x.data)


def test_backward_needs_scalar():
    with pytest.raises(DimensionError):
        backward(param([1.0, 2.0]) * 2.0)


def test_reset_drops_the_graph(f64):
    x = param([1.0, 2.0])
    y = (x * 2.0).tanh()
    graph = backward(y.sum())
    assert len(graph) > 0
    graph.reset()
    assert len(graph) == 0 and y.node is None


def test_unbroadcast():
    grad = np.ones((3, 4))
    assert np.array_equal(unbroadcast(grad, (1, 4)), np.full((1, 4), 3.0))
    assert np.array_equal(unbroadcast(grad, (4,)), np.full(4, 3.0))
    assert unbroadcast(grad, ()).item() == 12.0


def test_broadcast_add_gradient(f64):
    x, bias = param(np.zeros((3, 2))), param(np.zeros(2), "bias")
    backward((x + bias).sum())
    assert np.array_equal(bias.grad, [3.0, 3.0])


def test_structural_gradients(f64):
    a, b = param(np.ones((2, 1)), "a"), param(np.ones((2, 2)), "b")
    x = take_rows(concat([a, b], axis=1), [1, 1, 0])
    backward(gather(x, [0, 1, 2], [0, 2, 1]).sum())
    assert np.array_equal(a.grad, [[0.0], [1.0]])
    assert np.array_equal(b.grad, [[1.0, 0.0], [0.0, 1.0]])


def test_finite_difference_sum(f64):
    theta = param(np.random.default_rng(0).normal(size=(3, 3)))
    report = finite_difference_check(lambda: theta.sum(), [theta])
    assert report.passed and report.max_rel_error < 1e-9


def test_finite_difference_relu(f64):
    theta = param([0.5])
    report = finite_difference_check(lambda: theta.relu().sum(), [theta])
    assert report.passed and report.max_rel_error < 1e-9


def test_finite_difference_flags_a_wrong_gradient(f64):
    theta = param([0.3, -0.2])

    def doubled_with_wrong_backward():
        return _result("bad", theta.data * 2, (theta,), lambda g: (g * 3,)).sum()

    report = finite_difference_check(doubled_with_wrong_backward, [theta])
    assert not report.passed
    assert len(report.failures) == 2


def test_finite_difference_flags_a_tiny_wrong_gradient(f64):
    theta = param([0.3, -0.2])

    def scaled_with_wrong_backward():
        return _result("bad", theta.data * 2e-9, (theta,), lambda g: (g * 3e-9,)).sum()

    # absolute error is 1e-9 per coordinate, relative error 0.1
    report = finite_difference_check(scaled_with_wrong_backward, [theta])
    assert len(report.failures) == 2
    assert report.max_rel_error == pytest.approx(0.1, rel=1e-3)


def test_adam_first_step_moves_by_lr(f64):
    p = param(np.ones((2, 3)))
    p.grad = np.ones((2, 3))
    state = AdamState(base_lr=1e-3)
    lr = adam_step(state, [p], epoch=0)
    assert lr == 1e-3 and state.step == 1
    assert np.allclose(p.data - 1.0, -1e-3, rtol=1e-7, atol=0)


def test_adam_zero_gradient_keeps_params(f64):
    p = param(np.arange(4.0))
    before = p.data.copy()
    adam_step(AdamState(base_lr=1e-3), [p], epoch=0)
    assert np.array_equal(p.data, before)


def test_adam_zero_lr_keeps_params_bitwise():
    p = Parameter("w", np.random.default_rng(0).normal(size=(3, 3)))
    before = p.data.copy()
    p.grad = np.ones((3, 3), dtype=p.dtype)
    adam_step(AdamState(base_lr=0.0), [p], epoch=0)
    assert np.array_equal(p.data, before)


def test_adam_rejects_gradient_shape_mismatch(f64):
    p = param(np.zeros(3))
    p.grad = np.zeros(4)
    with pytest.raises(DimensionError):
        adam_step(AdamState(), [p], epoch=0)


def test_step_decay():
    state = AdamState(base_lr=1e-5)
    assert state.lr_at(0) == 1e-5
    assert state.lr_at(14) == 1e-5
    assert state.lr_at(15) == pytest.approx(1e-6)
    assert state.lr_at(30) == pytest.approx(1e-7)


def test_zero_grad():
    p = param([1.0, 2.0])
    p.grad = np.ones(2)
    zero_grad([p])
    assert np.array_equal(p.grad, np.zeros(2))


def test_precision_context_restores():
    default = Precision().dtype
    with Precision().use("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Precision().dtype == default
    assert Tensor([1.0]).dtype == default
