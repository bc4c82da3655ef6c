import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mcout import functional as F
from mcout.errors import ContractError, ShapeError
from mcout.gradcheck import check_gradients, numerical_gradient, relative_error
from mcout.tensor import (
    Tensor, concat, default_dtype, exp, get_default_dtype, index_select, log, matmul, mean, no_grad,
    power, reshape, scale, stack, tanh, transpose, tsum,
)

SHAPES = [(3,), (2, 3), (4, 1), (2, 3, 4), (1, 5, 2), (3, 2, 2, 2)]


def leaf(rng, shape, positive=False):
    data = rng.random(shape) + 0.5 if positive else rng.normal(size=shape)
    return Tensor(data, requires_grad=True, dtype=np.float64)


def weighted_sum(out, w):
    # a random linear functional makes every output entry matter
    return tsum(out * Tensor(w, dtype=np.float64))


def assert_grads(fn, tensors, tol=1e-4):
    errs = check_gradients(fn, tensors)
    assert max(errs.values()) < tol, errs


# ------------------------------------------------------------------ examples
def test_matmul_examples():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(a, b).data, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_against_finite_differences():
    rng = np.random.default_rng(0)
    a, b = leaf(rng, (3, 4)), leaf(rng, (4, 2))
    errs = check_gradients(lambda: tsum(matmul(a, b)), {"a": a, "b": b})
    assert max(errs.values()) < 1e-6


def test_quadratic_backward():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True, dtype=np.float64)
    tsum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])


def test_constant_leaf_gets_no_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    tsum(x * c).backward()
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, [3.0, 4.0])


def test_backward_twice_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = tsum(x * x)
    y.backward()
    with pytest.raises(ContractError, match="already"):
        y.backward()


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * x).backward()


def test_leaf_grads_accumulate_across_graphs():
    x = Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
    tsum(x).backward()
    tsum(scale(x, 2.0)).backward()
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * x
    assert not y.requires_grad and y.is_leaf


def test_default_dtype_switch():
    assert get_default_dtype() == np.float32
    with default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_shared_parent_gradient_sums():
    x = Tensor([2.0], requires_grad=True, dtype=np.float64)
    y = x * x + x
    tsum(y).backward()
    np.testing.assert_allclose(x.grad, [5.0])


# ----------------------------------------------------- finite-difference suite
@pytest.mark.parametrize("shape", SHAPES)
def test_elementwise_grads(shape):
    rng = np.random.default_rng(hash(shape) % 2**32)
    a, b = leaf(rng, shape), leaf(rng, shape)
    p = leaf(rng, shape, positive=True)
    w = rng.normal(size=shape)
    assert_grads(lambda: weighted_sum(a + b, w), {"a": a, "b": b})
    assert_grads(lambda: weighted_sum(a - b, w), {"a": a, "b": b})
    assert_grads(lambda: weighted_sum(a * b, w), {"a": a, "b": b})
    assert_grads(lambda: weighted_sum(a / p, w), {"a": a, "p": p})
    assert_grads(lambda: weighted_sum(scale(a, -1.7), w), {"a": a})
    assert_grads(lambda: weighted_sum(exp(a), w), {"a": a})
    assert_grads(lambda: weighted_sum(log(p), w), {"p": p})
    assert_grads(lambda: weighted_sum(tanh(a), w), {"a": a})
    assert_grads(lambda: weighted_sum(power(p, 2.5), w), {"p": p})
    assert_grads(lambda: weighted_sum(F.gelu(a), w), {"a": a})


@pytest.mark.parametrize("shape", SHAPES)
def test_broadcast_grads(shape):
    rng = np.random.default_rng(7)
    a = leaf(rng, shape)
    row = leaf(rng, shape[-1:])
    w = rng.normal(size=shape)
    assert_grads(lambda: weighted_sum(a + row, w), {"a": a, "row": row})
    assert_grads(lambda: weighted_sum(a * row, w), {"a": a, "row": row})


@pytest.mark.parametrize("shape", SHAPES)
def test_reduction_grads(shape):
    rng = np.random.default_rng(8)
    a = leaf(rng, shape)
    assert_grads(lambda: tsum(a * a), {"a": a})
    assert_grads(lambda: mean(a * a), {"a": a})
    w = rng.normal(size=shape[:-1] + (1,))
    assert_grads(lambda: weighted_sum(tsum(a, axis=-1, keepdims=True), w), {"a": a})
    assert_grads(lambda: tsum(mean(a, axis=0) ** 2), {"a": a})


@pytest.mark.parametrize("shape", SHAPES)
def test_shaping_grads(shape):
    rng = np.random.default_rng(9)
    a = leaf(rng, shape)
    w = rng.normal(size=shape)
    assert_grads(lambda: tsum(reshape(a, (-1,)) * Tensor(w.reshape(-1), dtype=np.float64)), {"a": a})
    axes = tuple(reversed(range(len(shape))))
    assert_grads(lambda: weighted_sum(transpose(a, axes), np.transpose(w, axes)), {"a": a})
    b = leaf(rng, shape)
    wc = rng.normal(size=(shape[0] * 2,) + shape[1:])
    assert_grads(lambda: weighted_sum(concat([a, b], axis=0), wc), {"a": a, "b": b})
    ws = rng.normal(size=(2,) + shape)
    assert_grads(lambda: weighted_sum(stack([a, b]), ws), {"a": a, "b": b})
    assert_grads(lambda: tsum(index_select(a, slice(0, 1)) ** 2), {"a": a})
    idx = np.array([0, 0, shape[0] - 1])
    assert_grads(lambda: tsum(index_select(a, idx) ** 2), {"a": a})


@pytest.mark.parametrize("m,k,n,batch", [(1, 1, 1, ()), (3, 4, 2, ()), (2, 5, 3, (2,)), (4, 3, 3, (2, 2)),
                                         (1, 6, 4, (3,)), (5, 2, 1, ())])
def test_matmul_grads(m, k, n, batch):
    rng = np.random.default_rng(m * 100 + k * 10 + n)
    a = leaf(rng, batch + (m, k))
    b = leaf(rng, batch + (k, n))
    shared = leaf(rng, (k, n))
    w = rng.normal(size=batch + (m, n))
    assert_grads(lambda: weighted_sum(matmul(a, b), w), {"a": a, "b": b})
    assert_grads(lambda: weighted_sum(matmul(a, shared), w), {"a": a, "w": shared})


# ----------------------------------------------------------------- properties
@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                  elements=st.floats(-5, 5)))
def test_concat_then_slice_round_trips(x):
    a = Tensor(x, dtype=np.float64)
    b = Tensor(x * 2, dtype=np.float64)
    c = concat([a, b], axis=0)
    n = x.shape[0]
    assert np.array_equal(c[:n].data, x)
    assert np.array_equal(c[n:].data, x * 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_numerical_gradient_is_exact_for_linear_functions(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, (4,))
    w = rng.normal(size=4)
    num = numerical_gradient(lambda: weighted_sum(x, w), x)
    assert relative_error(num, w) < 1e-8
