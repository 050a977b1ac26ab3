from __future__ import annotations

import math

import numpy as np
import pytest

from mode_lab.exceptions import ContractError, NumericError, ShapeError
from mode_lab.tensor_core import (
    Node,
    add,
    as_matrix,
    backward,
    columns,
    finite_diff_grad,
    matmul,
    mean_all,
    mul,
    outer,
    scale,
    scale_rows,
    softmax_row,
    softmax_rows,
    square,
    sub,
    sum_all,
    transpose,
)


def test_matmul_examples():
    m = np.array([[1.0, -2.0], [3.5, 4.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), m).value, m)
    assert matmul([[1.0, 2.0]], [[3.0], [4.0]]).value.tolist() == [[11.0]]
    rhs = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(matmul(np.zeros((2, 3)), rhs).value, np.zeros((2, 4)))


def test_matmul_is_associative(rng):
    for _ in range(10):
        a, b, c = (rng.normal(size=shape) for shape in [(3, 4), (4, 2), (2, 5)])
        left = matmul(matmul(a, b), c).value
        right = matmul(a, matmul(b, c)).value
        np.testing.assert_allclose(left, right, rtol=1e-12, atol=1e-12)


def test_matmul_rejects_inner_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@pytest.mark.parametrize("op", [add, sub, mul])
def test_elementwise_ops_reject_shape_mismatch(op):
    with pytest.raises(ShapeError):
        op(np.ones((2, 2)), np.ones((2, 3)))


def test_outer_examples():
    assert outer([1.0, 2.0], [3.0, 4.0]).value.tolist() == [[3.0, 4.0], [6.0, 8.0]]
    basis = outer([1.0, 0.0, 0.0], [1.0, 0.0])
    expected = np.zeros((3, 2))
    expected[0, 0] = 1.0
    np.testing.assert_array_equal(basis.value, expected)
    np.testing.assert_array_equal(outer([0.0, 0.0], [5.0, 6.0, 7.0]).value, 0.0)


def test_outer_rejects_matrices():
    with pytest.raises(ShapeError):
        outer(np.ones((2, 2)), [1.0, 2.0])


def test_softmax_row_examples():
    np.testing.assert_allclose(softmax_row([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(softmax_row([math.log(2.0), 0.0]), [2 / 3, 1 / 3])
    np.testing.assert_allclose(softmax_row([1000.0, 1000.0]), [0.5, 0.5])


def test_softmax_row_is_a_distribution(rng):
    for _ in range(20):
        probs = softmax_row(rng.normal(0, 30, size=5))
        assert np.all(probs >= 0)
        assert abs(probs.sum() - 1.0) < 1e-12


@pytest.mark.parametrize("shift", [-40.0, 3.5, 1000.0])
def test_softmax_row_ignores_a_constant_shift(rng, shift):
    logits = rng.normal(0, 3, size=6)
    np.testing.assert_allclose(
        softmax_row(logits + shift), softmax_row(logits), rtol=0, atol=1e-12
    )


def test_softmax_row_rejects_non_finite_logits():
    with pytest.raises(NumericError):
        softmax_row([0.0, np.inf])


def test_softmax_rows_match_per_row_softmax(rng):
    logits = rng.normal(size=(4, 3))
    probs = softmax_rows(logits).value
    for row, expected in zip(probs, logits):
        np.testing.assert_allclose(row, softmax_row(expected), atol=1e-15)


def test_backward_of_sum_gives_ones(rng):
    x = Node.leaf(rng.normal(size=(3, 2)))
    backward(sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_of_half_square_gives_input(rng):
    x = Node.leaf(rng.normal(size=(2, 4)))
    backward(scale(sum_all(mul(x, x)), 0.5))
    np.testing.assert_allclose(x.grad, x.value, atol=1e-15)


def test_unused_leaf_gets_zero_gradient(rng):
    x = Node.leaf(rng.normal(size=(2, 2)))
    unused = Node.leaf(rng.normal(size=(2, 2)))
    backward(sum_all(x))
    np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))


def test_constants_receive_no_gradient(rng):
    w = Node.constant(rng.normal(size=(2, 2)))
    x = Node.leaf(rng.normal(size=(1, 2)))
    backward(sum_all(matmul(x, w)))
    np.testing.assert_array_equal(w.grad, 0.0)
    np.testing.assert_allclose(x.grad, w.value.sum(axis=1).reshape(1, -1))


def test_backward_twice_gives_same_gradient(rng):
    x = Node.leaf(rng.normal(size=(3, 3)))
    loss = sum_all(square(matmul(x, x)))
    backward(loss)
    first = x.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(x.grad, first)


def test_backward_requires_scalar_output(rng):
    x = Node.leaf(rng.normal(size=(2, 2)))
    with pytest.raises(ContractError):
        backward(add(x, x))


def test_item_requires_scalar():
    with pytest.raises(ContractError):
        Node([[1.0, 2.0]]).item()


def test_as_matrix_validation():
    assert as_matrix([1.0, 2.0]).shape == (1, 2)
    with pytest.raises(ShapeError):
        as_matrix(np.ones((2, 2, 2)))
    with pytest.raises(ShapeError):
        as_matrix(np.ones((0, 3)))
    with pytest.raises(NumericError):
        as_matrix([[1.0, np.nan]])


def test_operators_build_graph(rng):
    a = Node.leaf(rng.normal(size=(2, 3)))
    b = rng.normal(size=(3, 2))
    out = a @ b - np.ones((2, 2)) + a @ b
    backward(sum_all(out))
    np.testing.assert_allclose(a.grad, 2 * np.ones((2, 2)) @ b.T)


def test_finite_diff_examples():
    (linear,) = finite_diff_grad(lambda p: p[0][0, 0], [[[2.0]]])
    assert abs(linear[0, 0] - 1.0) < 1e-9
    (quadratic,) = finite_diff_grad(lambda p: p[0][0, 0] ** 2, [[[3.0]]])
    assert abs(quadratic[0, 0] - 6.0) < 1e-6
    grads = finite_diff_grad(lambda p: 4.2, [np.ones((2, 2)), np.ones((1, 3))])
    for grad in grads:
        assert np.abs(grad).max() < 1e-9


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ContractError):
        finite_diff_grad(lambda p: 0.0, [[[1.0]]], h=0.0)


def test_finite_diff_rejects_non_finite_function():
    with pytest.raises(NumericError):
        finite_diff_grad(lambda p: np.inf, [[[1.0]]])


# (name, inputs, graph builder) for every differentiable primitive
GRADIENT_CASES = [
    ("matmul", [(3, 4), (4, 2)], lambda a, b: matmul(a, b)),
    ("add", [(2, 3), (2, 3)], lambda a, b: add(a, b)),
    ("sub", [(2, 3), (2, 3)], lambda a, b: sub(a, b)),
    ("mul", [(2, 3), (2, 3)], lambda a, b: mul(a, b)),
    ("square", [(2, 3)], lambda a: square(a)),
    ("scale", [(2, 3)], lambda a: scale(a, -1.7)),
    ("transpose", [(2, 3), (2, 3)], lambda a, b: matmul(transpose(a), b)),
    ("columns", [(3, 4)], lambda a: columns(a, 1, 3)),
    ("scale_rows", [(3, 2), (3, 1)], lambda a, w: scale_rows(a, w)),
    ("outer", [(1, 3), (2, 1)], lambda u, v: outer(u, v)),
    ("softmax_rows", [(3, 4)], lambda a: softmax_rows(a)),
    ("mean_all", [(3, 4)], lambda a: mean_all(a)),
]


@pytest.mark.parametrize(
    ("shapes", "build"),
    [(shapes, build) for _, shapes, build in GRADIENT_CASES],
    ids=[name for name, _, _ in GRADIENT_CASES],
)
def test_primitive_gradients_match_finite_differences(rng, shapes, build):
    values = [rng.normal(size=shape) for shape in shapes]
    # a fixed random readout turns any output into a scalar with a rich gradient
    probe_shape = build(*values).shape
    probe = rng.normal(size=probe_shape)

    def objective(params):
        return sum_all(mul(build(*params), probe))

    leaves = [Node.leaf(v) for v in values]
    backward(objective(leaves))
    numeric = finite_diff_grad(lambda p: objective(p).item(), values)
    for leaf, expected in zip(leaves, numeric):
        np.testing.assert_allclose(leaf.grad, expected, rtol=1e-6, atol=1e-8)
