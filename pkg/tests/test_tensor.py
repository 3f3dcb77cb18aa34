import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pgscam import tensor as T
from pgscam.gradcheck import OPS, _case, check_gradients


def grad_of(objective, leaf):
    T.backward(objective)
    return leaf.grad


def test_matmul_examples():
    a = T.Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(a, T.Tensor(np.eye(2))).values, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(T.Tensor([[1, 2]]), T.Tensor([[3], [4]])).values, [[11]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 2))))


def test_relu_forward_and_subgradient():
    x = T.Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = T.relu(x)
    np.testing.assert_array_equal(y.values, [0, 0, 2])
    np.testing.assert_array_equal(grad_of(T.total(y), x), [0, 0, 1])


def test_relu_all_negative():
    x = T.Tensor(-np.arange(1.0, 7.0).reshape(2, 3), requires_grad=True)
    y = T.relu(x)
    assert not y.values.any()
    assert not grad_of(T.total(y), x).any()


def test_add_bias_examples():
    x = T.Tensor([[1, 1], [2, 2]])
    np.testing.assert_array_equal(T.add_bias(x, T.Tensor([0, 0])).values, x.values)
    np.testing.assert_array_equal(T.add_bias(T.Tensor([[1, 1]]), T.Tensor([1, 2])).values, [[2, 3]])
    b = T.Tensor([0.5, -1.0], requires_grad=True)
    np.testing.assert_array_equal(grad_of(T.total(T.add_bias(T.Tensor(np.ones((5, 2))), b)), b), [5, 5])


def test_add_bias_shape_error():
    with pytest.raises(T.ShapeError):
        T.add_bias(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros(2)))


def test_gather_rows_identity_and_accumulation():
    x = T.Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    np.testing.assert_array_equal(T.gather_rows(x, [0, 1]).values, x.values)
    y = T.gather_rows(x, [0, 0])
    np.testing.assert_array_equal(y.values, [[1, 2], [1, 2]])
    np.testing.assert_array_equal(grad_of(T.total(y), x), [[2, 2], [0, 0]])


def test_gather_rows_out_of_range():
    with pytest.raises(IndexError):
        T.gather_rows(T.Tensor(np.zeros((2, 2))), [2])
    with pytest.raises(IndexError):
        T.gather_rows(T.Tensor(np.zeros((2, 2))), [-1])


def test_neighborhood_max_examples():
    x = T.Tensor(np.arange(6.0).reshape(3, 2))
    np.testing.assert_array_equal(T.neighborhood_max(x, [[0], [1], [2]]).values, x.values)
    y = T.neighborhood_max(T.Tensor([[1.0, 5.0], [3.0, 2.0]]), [[0, 1], [0, 1]])
    np.testing.assert_array_equal(y.values, [[3, 5], [3, 5]])


def test_neighborhood_max_gradient_goes_to_lowest_index_on_ties():
    x = T.Tensor([[2.0], [2.0], [1.0]], requires_grad=True)
    y = T.neighborhood_max(x, [[2, 1, 0]])
    np.testing.assert_array_equal(grad_of(T.total(y), x), [[1], [0], [0]])


def test_neighborhood_max_rejects_empty_list():
    with pytest.raises(ValueError):
        T.neighborhood_max(T.Tensor(np.zeros((2, 1))), [[0], []])


def test_cross_entropy_uniform_and_saturated():
    loss = T.softmax_cross_entropy(T.Tensor(np.full((3, 4), 0.7)), [0, 1, 3])
    assert loss.item() == pytest.approx(math.log(4), abs=1e-14)
    z = np.zeros((4, 5))
    labels = np.array([0, 2, 4, 1])
    z[np.arange(4), labels] = 20.0
    assert T.softmax_cross_entropy(T.Tensor(z), labels).item() < 1e-8


def test_cross_entropy_is_stable_for_huge_logits():
    loss = T.softmax_cross_entropy(T.Tensor([[1000.0, 0.0]]), [1])
    assert loss.item() == pytest.approx(1000.0)


def test_backward_sum_gives_ones_and_fan_out_twos():
    x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    np.testing.assert_array_equal(grad_of(T.total(x), x), np.ones((2, 3)))
    x.zero_grad()
    np.testing.assert_array_equal(grad_of(T.total(x + x), x), np.full((2, 3), 2.0))


def test_backward_rejects_non_scalar():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(T.GraphError):
        T.backward(x)


def test_gradients_accumulate_until_reset():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.total(x))
    T.backward(T.total(x))
    np.testing.assert_array_equal(x.grad, [2, 2])
    T.zero_grad([x])
    assert x.grad is None


def test_constants_get_no_graph():
    y = T.matmul(T.Tensor(np.eye(2)), T.Tensor(np.eye(2)))
    assert y.node is None and not y.requires_grad


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, (4, 3), elements=st.floats(-5, 5)),
    st.floats(-3, 3),
    st.floats(-3, 3),
)
def test_backward_is_linear_in_the_objective(a, alpha, beta):
    w1 = np.random.Generator(np.random.PCG64(1)).standard_normal((3, 2))
    w2 = np.random.Generator(np.random.PCG64(2)).standard_normal((4, 2))

    def grads(obj_fn):
        x = T.Tensor(a, requires_grad=True)
        T.backward(obj_fn(x))
        return x.grad

    def f(x):
        return T.total(T.mul(T.relu(T.matmul(x, T.Tensor(w1))), T.Tensor(w2)))

    def g(x):
        return T.total(T.mul(x, x))

    combined = grads(lambda x: T.add(T.scale(f(x), alpha), T.scale(g(x), beta)))
    separate = alpha * grads(f) + beta * grads(g)
    np.testing.assert_allclose(combined, separate, atol=1e-12, rtol=0)


def test_backward_is_deterministic():
    rng = np.random.Generator(np.random.PCG64(3))
    a, w = rng.standard_normal((6, 4)), rng.standard_normal((4, 3))

    def run():
        x = T.Tensor(a, requires_grad=True)
        T.backward(T.softmax_cross_entropy(T.relu(T.matmul(x, T.Tensor(w))), [0, 1, 2, 0, 1, 2]))
        return x.grad

    assert run().tobytes() == run().tobytes()


@pytest.mark.parametrize("op", OPS)
def test_every_op_matches_finite_differences(op):
    rng = np.random.Generator(np.random.PCG64(OPS.index(op)))
    for _ in range(5):
        arrays_, build = _case(op, rng)
        err, checked, _ = check_gradients(build, arrays_)
        assert checked > 0
        assert err < 1e-6


def test_fault_injection_is_detected():
    rng = np.random.Generator(np.random.PCG64(0))
    arrays_, build = _case("matmul", rng)
    T.FAULTS["matmul"] = 1.01
    try:
        err, _, _ = check_gradients(build, arrays_)
    finally:
        T.FAULTS.clear()
    assert err > 1e-4


def test_branch_pattern_changes_across_a_kink():
    def out(v):
        return T.total(T.relu(T.Tensor([v], requires_grad=True)))

    assert T.branch_pattern(out(0.5)) == T.branch_pattern(out(0.7))
    assert T.branch_pattern(out(0.5)) != T.branch_pattern(out(-0.5))
