import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dualembed.tensor import (ShapeError, elementwise, finite_diff_grad, l2sq_distance,
                              matmul, reduce)


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_elementwise_examples():
    np.testing.assert_array_equal(elementwise("add", np.array([1.0, 2.0]), np.array([3.0, 4.0])), [4, 6])
    np.testing.assert_array_equal(elementwise("relu", np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    np.testing.assert_array_equal(elementwise("scale", np.array([1.0, 2.0]), 0), [0, 0])
    np.testing.assert_array_equal(elementwise("sub", np.array([1.0, 2.0]), 1.0), [0, 1])
    np.testing.assert_array_equal(elementwise("relu_grad", np.array([-1.0, 2.0]), np.array([5.0, 5.0])), [0, 5])


def test_elementwise_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        elementwise("mul", np.ones(2), np.ones(3))


def test_matmul_examples(rng):
    np.testing.assert_array_equal(matmul(np.eye(2), np.array([[5.0], [7.0]])), [[5], [7]])
    np.testing.assert_array_equal(matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])), [[11]])
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), rtol=1e-12, atol=1e-14)
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@pytest.mark.parametrize("m,k,n", [(1, 1, 1), (7, 5, 3), (64, 64, 64)])
def test_matmul_matches_loop_oracle(rng, m, k, n):
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    ref = naive_matmul(a, b)
    err = np.abs(matmul(a, b) - ref).max() / max(np.abs(ref).max(), 1e-300)
    assert err <= 1e-12


def test_reduce_examples():
    assert reduce("sum", np.array([1.0, 2.0, 3.0])) == 6
    assert reduce("argmax", np.array([0.1, 0.7, 0.2])) == 1
    assert reduce("argmax", np.array([0.5, 0.5])) == 0
    np.testing.assert_array_equal(reduce("argmax", np.array([[1, 1], [0, 2]]), axis=1), [0, 1])
    with pytest.raises(ValueError):
        reduce("sum", np.array([]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e3, 1e3)), st.randoms())
def test_sum_permutation_invariant(x, r):
    perm = list(range(len(x)))
    r.shuffle(perm)
    assert abs(reduce("sum", x) - reduce("sum", x[perm])) <= 1e-10 * max(1.0, np.abs(x).sum())


def test_l2sq_examples(rng):
    assert l2sq_distance(np.array([1.0, 1.0]), np.array([1.0, 1.0])) == 0
    assert l2sq_distance(np.array([0.0, 0.0]), np.array([3.0, 4.0])) == 25
    a, b = rng.standard_normal(6), rng.standard_normal(6)
    assert l2sq_distance(a, b) == l2sq_distance(b, a)
    with pytest.raises(ShapeError):
        l2sq_distance(np.ones(2), np.ones(3))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e3, 1e3)))
def test_l2sq_properties(a):
    assert l2sq_distance(a, a) == 0.0
    assert l2sq_distance(a, -a) >= 0.0


def test_finite_diff_examples():
    h = 1e-5
    np.testing.assert_allclose(finite_diff_grad(lambda v: np.sum(v ** 2), np.array([1.0, 2.0]), h), [2, 4], atol=1e-6)
    np.testing.assert_array_equal(finite_diff_grad(lambda v: 3.0, np.array([1.0, 2.0]), h), [0, 0])
    w = np.array([0.5, -2.0, 3.0])
    np.testing.assert_allclose(finite_diff_grad(lambda v: w @ v, np.zeros(3), h), w, atol=1e-9)
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda v: np.inf, np.zeros(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2 ** 31))
def test_finite_diff_exact_on_quadratics(d, seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal((d, d))
    q = a + a.T
    g = r.standard_normal(d)
    x = r.standard_normal(d)
    h = 1e-5
    f = lambda v: 0.5 * v @ q @ v + g @ v + 1.0
    num = finite_diff_grad(f, x, h)
    # central differences are exact for quadratics up to roundoff
    assert np.abs(num - (q @ x + g)).max() <= 10 * h ** 2
