import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uapjr.errors import DegenerateInputError, ShapeError
from uapjr.linalg import (RngStream, frobenius_inner_product, frobenius_norm, matmul, power_iteration,
                          sample_unit_sphere, svd)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def jacobi_eigenvalues(s, tol=1e-14, max_sweeps=100):
    """Cyclic two-sided Jacobi on a symmetric matrix; eigenvalues only."""
    a = np.array(s, dtype=np.float64)
    n = len(a)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * max(np.linalg.norm(a), 1e-300):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta ** 2 + 1)) if theta != 0 else 1.0
                c = 1 / np.sqrt(t ** 2 + 1)
                sn = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = sn, -sn
                a = rot.T @ a @ rot
    return np.sort(np.diag(a))[::-1]


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.data())
def test_matmul_matches_triple_loop(m, k, n, data):
    a = data.draw(arrays(np.float64, (m, k), elements=finite))
    b = data.draw(arrays(np.float64, (k, n), elements=finite))
    np.testing.assert_allclose(matmul(a, b), triple_loop(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 2**32 - 1))
def test_svd_against_jacobi_eigen_oracle(m, n, seed):
    a = RngStream(seed).normal((m, n))
    u, s, v = svd(a)
    k = min(m, n)
    oracle = np.sqrt(np.clip(jacobi_eigenvalues(a.T @ a if n <= m else a @ a.T), 0, None))[:k]
    np.testing.assert_allclose(s, oracle, atol=1e-8 * max(1.0, oracle[0]))
    np.testing.assert_allclose(u @ np.diag(s) @ v.T, a, atol=1e-10)
    np.testing.assert_allclose(u.T @ u, np.eye(k), atol=1e-10)
    np.testing.assert_allclose(v.T @ v, np.eye(k), atol=1e-10)
    assert np.all(np.diff(s) <= 0)


def test_svd_rank_deficient_and_zero():
    a = np.outer([1.0, 2.0, 3.0], [1.0, -1.0])
    u, s, v = svd(a)
    np.testing.assert_allclose(s, [np.sqrt(14) * np.sqrt(2), 0.0], atol=1e-12)
    np.testing.assert_allclose(u.T @ u, np.eye(2), atol=1e-12)
    _, s0, _ = svd(np.zeros((3, 2)))
    assert np.all(s0 == 0)


def test_svd_known_diagonal():
    u, s, v = svd(np.diag([1.0, 5.0]))
    np.testing.assert_allclose(s, [5.0, 1.0])
    assert abs(abs(v[1, 0]) - 1) < 1e-14


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_power_iteration_matches_svd(m, n, seed):
    rng = RngStream(seed)
    a = rng.normal((m, n))
    sigma, v = power_iteration(a, p=2, rng=rng.child("pi"))
    _, s, vs = svd(a)
    assert abs(sigma - s[0]) <= 1e-6 * s[0]
    assert abs(np.linalg.norm(v) - 1) < 1e-12
    assert abs(np.linalg.norm(a @ v) - s[0]) <= 1e-6 * s[0]


def corner_max(a):
    best, arg = -1.0, None
    for signs in itertools.product((-1.0, 1.0), repeat=a.shape[1]):
        val = np.linalg.norm(a @ np.array(signs))
        if val > best + 1e-15:
            best, arg = val, np.array(signs)
    return best, arg


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_power_iteration_inf_matches_corner_enumeration(m, n, seed):
    a = RngStream(seed).normal((m, n))
    value, v = power_iteration(a, p=np.inf, rng=RngStream(seed + 1))
    best, _ = corner_max(a)
    assert set(np.unique(v)) <= {-1.0, 1.0}
    assert abs(value - best) <= 1e-12 * max(best, 1.0)
    assert abs(np.linalg.norm(a @ v) - best) <= 1e-12 * max(best, 1.0)


def test_power_iteration_inf_known_value():
    value, v = power_iteration(np.ones((2, 2)), p=np.inf)
    assert value == pytest.approx(2 * np.sqrt(2), abs=1e-14)
    assert v[0] == v[1]


def test_power_iteration_degenerate():
    with pytest.raises(DegenerateInputError):
        power_iteration(np.zeros((3, 3)))
    with pytest.raises(NotImplementedError):
        power_iteration(np.eye(2), q=1)


def test_cauchy_schwarz_random_pairs():
    rng = RngStream(11)
    for i in range(1000):
        shape = tuple(rng.child(i).integers(1, 6, size=2))
        a, b = rng.child(i, "a").normal(shape), rng.child(i, "b").normal(shape)
        assert frobenius_inner_product(a, b) <= frobenius_norm(a) * frobenius_norm(b) + 1e-10


def test_frobenius_inner_product_is_trace():
    rng = RngStream(3)
    a, b = rng.normal((4, 3)), rng.child("b").normal((4, 3))
    assert frobenius_inner_product(a, b) == pytest.approx(np.trace(a.T @ b), rel=1e-13)
    with pytest.raises(ShapeError):
        frobenius_inner_product(a, b.T)


def test_sample_unit_sphere():
    x = sample_unit_sphere(10, RngStream(0), size=20000)
    np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-14)
    # E[v v^T] = I / d for the uniform distribution on the sphere
    np.testing.assert_allclose(x.T @ x / len(x), np.eye(10) / 10, atol=0.01)


def test_rng_stream_is_reproducible_and_children_differ():
    a, b = RngStream(5), RngStream(5)
    np.testing.assert_array_equal(a.normal(4), b.normal(4))
    np.testing.assert_array_equal(RngStream(5).child("x").normal(3), RngStream(5).child("x").normal(3))
    assert not np.array_equal(RngStream(5).child("x").normal(3), RngStream(5).child("y").normal(3))
    assert not np.array_equal(RngStream(5).normal(3), RngStream(6).normal(3))
