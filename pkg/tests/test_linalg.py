import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from basis_selection.linalg import ShapeError, as_matrix, frobenius_inner, matmul, svd


def naive_matmul(a, b):
    n, k = a.shape
    _, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def test_svd_identity():
    res = svd(np.eye(3))
    assert res.rank == 3
    np.testing.assert_allclose(res.s, [1, 1, 1])


def test_svd_diagonal():
    res = svd(np.diag([3.0, 2.0, 1.0]))
    np.testing.assert_allclose(res.s, [3, 2, 1])
    np.testing.assert_allclose(res.u, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(res.v, np.eye(3), atol=1e-15)


def test_svd_random_reconstruction():
    w = np.random.default_rng(0).normal(size=(64, 48))
    res = svd(w)
    err = np.linalg.norm(res.u @ np.diag(res.s) @ res.v.T - w)
    assert err / max(1.0, np.linalg.norm(w)) <= 1e-10
    assert np.all(np.diff(res.s) <= 0)


def test_svd_drops_zero_singular_values():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(10, 2)) @ rng.normal(size=(2, 7))
    res = svd(w)
    assert res.rank == 2
    assert res.u.shape == (10, 2) and res.v.shape == (7, 2)


def test_svd_sign_convention_and_determinism():
    w = np.random.default_rng(2).normal(size=(9, 5))
    a, b = svd(w), svd(w.copy())
    assert np.array_equal(a.u, b.u) and np.array_equal(a.s, b.s)
    pivots = a.u[np.argmax(np.abs(a.u), axis=0), np.arange(a.rank)]
    assert np.all(pivots >= 0)


def test_svd_rejects_nonfinite():
    with pytest.raises(ValueError):
        svd(np.array([[1.0, np.nan]]))


def test_matmul_identity_and_scalar():
    a = np.random.default_rng(3).normal(size=(4, 4))
    np.testing.assert_array_equal(matmul(np.eye(4), a), a)
    assert matmul([[2.0]], [[3.0]])[0, 0] == 6.0


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), rtol=1e-14, atol=1e-14)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_frobenius_inner_cases():
    u = np.array([1.0, 2.0, 2.0]) / 3.0
    v = np.array([0.6, 0.8])
    a = np.outer(u, v)
    assert frobenius_inner(a, a) == pytest.approx(1.0, abs=1e-15)
    u2 = np.array([2.0, 1.0, -2.0]) / 3.0
    assert frobenius_inner(a, np.outer(u2, v)) == pytest.approx(0.0, abs=1e-15)
    assert frobenius_inner([[1, 2], [3, 4]], [[1, 0], [0, 1]]) == 5.0
    with pytest.raises(ShapeError):
        frobenius_inner(np.ones((2, 2)), np.ones((2, 3)))


def test_as_matrix_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        as_matrix(np.ones(3))
    with pytest.raises(ShapeError):
        as_matrix(np.ones((0, 3)))


shapes = st.tuples(st.integers(1, 12), st.integers(1, 12))


@settings(max_examples=60, deadline=None)
@given(shapes.flatmap(lambda s: arrays(np.float64, s, elements=st.floats(-100, 100))))
def test_svd_properties(w):
    res = svd(w)
    scale = max(1.0, np.linalg.norm(w))
    if res.rank:
        assert np.linalg.norm(res.reconstruct() - w) <= 1e-10 * scale
        assert np.max(np.abs(res.u.T @ res.u - np.eye(res.rank))) <= 1e-8
        assert np.max(np.abs(res.v.T @ res.v - np.eye(res.rank))) <= 1e-8
        assert np.all(np.diff(res.s) <= 0) and np.all(res.s > 0)
        for i in range(res.rank):
            basis_i = np.outer(res.u[:, i], res.v[:, i])
            assert abs(np.linalg.norm(basis_i) - 1.0) <= 1e-10
    else:
        assert np.linalg.norm(w) <= 1e-10 * scale
