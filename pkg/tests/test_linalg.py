import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from coreflow.errors import NotSymmetric, RankDeficient
from coreflow.linalg import qr_thin, singular_values, sym_eig_desc


def test_qr_identity():
    Q, R = qr_thin(np.eye(3))
    assert np.array_equal(Q, np.eye(3)) or np.allclose(Q, np.eye(3), atol=0)
    assert np.allclose(R, np.eye(3), atol=0)


def test_qr_permuted_orthonormal_input():
    A = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]])
    Q, R = qr_thin(A)
    np.testing.assert_allclose(Q, A, atol=1e-15)
    np.testing.assert_allclose(R, np.eye(2), atol=1e-15)


def test_qr_random_reconstruction():
    A = np.random.default_rng(42).standard_normal((6, 3))
    Q, R = qr_thin(A)
    assert np.abs(Q.T @ Q - np.eye(3)).max() <= 1e-10
    assert np.linalg.norm(Q @ R - A) <= 1e-9 * np.linalg.norm(A)
    assert np.allclose(R, np.triu(R))
    assert np.all(np.diag(R) >= 0)


def test_qr_rank_deficient():
    A = np.ones((4, 2))
    with pytest.raises(RankDeficient):
        qr_thin(A)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12).flatmap(lambda r: st.tuples(st.just(r), st.integers(r, 16))),
       st.integers(0, 2**32 - 1))
def test_qr_properties(shape, seed):
    R_, m = shape
    A = np.random.default_rng(seed).standard_normal((m, R_))
    Q, R = qr_thin(A)
    assert np.abs(Q.T @ Q - np.eye(R_)).max() <= 1e-10
    assert np.linalg.norm(Q @ R - A) <= 1e-9 * np.linalg.norm(A)


def test_qr_deterministic():
    A = np.random.default_rng(1).standard_normal((9, 4))
    a, b = qr_thin(A), qr_thin(A.copy())
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_eig_diagonal():
    w, V = sym_eig_desc(np.diag([3.0, 1.0, 2.0]))
    np.testing.assert_allclose(w, [3, 2, 1], atol=1e-14)
    np.testing.assert_allclose(np.abs(V), np.eye(3)[:, [0, 2, 1]], atol=1e-14)


def test_eig_two_by_two():
    w, V = sym_eig_desc(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(w, [3, 1], atol=1e-13)
    s = np.sqrt(0.5)
    np.testing.assert_allclose(V[:, 0], [s, s], atol=1e-12)
    np.testing.assert_allclose(V[:, 1], [s, -s], atol=1e-12)


def test_eig_zero_matrix():
    w, V = sym_eig_desc(np.zeros((4, 4)))
    assert np.all(w == 0)
    np.testing.assert_array_equal(V, np.eye(4))


def test_eig_not_symmetric():
    with pytest.raises(NotSymmetric):
        sym_eig_desc(np.array([[1.0, 2.0], [0.0, 1.0]]))


@pytest.mark.parametrize("n", [1, 2, 5, 16, 33])
def test_eig_residuals(n):
    rng = np.random.default_rng(n)
    B = rng.standard_normal((n, n))
    A = B + B.T
    w, V = sym_eig_desc(A)
    norm2 = np.abs(np.linalg.eigvalsh(A)).max()
    assert np.all(np.diff(w) <= 0)
    assert np.abs(A @ V - V * w).max(axis=0).max() <= 1e-8 * norm2
    assert np.abs(V.T @ V - np.eye(n)).max() <= 1e-10
    for k in range(n):
        v = V[:, k]
        first = v[np.abs(v) > 1e-12 * np.abs(v).max()][0]
        assert first > 0


def test_eig_deterministic():
    B = np.random.default_rng(3).standard_normal((10, 10))
    A = B @ B.T
    a, b = sym_eig_desc(A), sym_eig_desc(A.copy())
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_singular_values_examples():
    np.testing.assert_allclose(singular_values(np.diag([2.0, -3.0])), [3, 2], atol=1e-14)
    u = np.array([0.6, 0.8, 0.0])
    v = np.array([1.0, 0.0])
    s = singular_values(np.outer(u, v))
    np.testing.assert_allclose(s, [1, 0], atol=1e-14)


def test_singular_values_vs_eig():
    A = np.random.default_rng(7).standard_normal((5, 3))
    w, _ = sym_eig_desc(A.T @ A)
    np.testing.assert_allclose(singular_values(A), np.sqrt(np.clip(w, 0, None)), rtol=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 32), st.integers(1, 32), st.integers(0, 2**32 - 1))
def test_singular_values_properties(m, n, seed):
    A = np.random.default_rng(seed).standard_normal((m, n))
    s = singular_values(A)
    assert len(s) == min(m, n)
    assert np.all(s >= 0) and np.all(np.diff(s) <= 0)
    assert abs(np.sum(s**2) - np.sum(A**2)) <= 1e-8 * np.sum(A**2)
    w, _ = sym_eig_desc(A.T @ A if n <= m else A @ A.T)
    np.testing.assert_allclose(s, np.sqrt(np.clip(w[: len(s)], 0, None)), rtol=1e-7, atol=1e-7 * s[0])


def test_singular_values_rejects_nonfinite():
    with pytest.raises(ValueError):
        singular_values(np.array([[np.nan, 1.0]]))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(-1e3, 1e3)))
def test_eig_reconstructs_hypothesis(B):
    A = B + B.T
    w, V = sym_eig_desc(A)
    scale = max(np.abs(A).max(), 1e-300)
    assert np.abs(V @ np.diag(w) @ V.T - A).max() <= 1e-9 * scale + 1e-300
