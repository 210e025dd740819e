import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from divlearn.errors import NotOrthonormal, NotSymmetric, RankDeficient, Singular
from divlearn.numlin import (
    check_orthonormal,
    least_squares,
    qr_orthonormalize,
    subspace_sine,
    sym_pinv,
    symmetric_eig,
)


def gauss_elim_solve(M, v):
    """Independent oracle: Gaussian elimination with partial pivoting."""
    M = [list(map(float, row)) + [float(b)] for row, b in zip(M, v)]
    n = len(M)
    for c in range(n):
        p = max(range(c, n), key=lambda i: abs(M[i][c]))
        M[c], M[p] = M[p], M[c]
        for i in range(c + 1, n):
            f = M[i][c] / M[c][c]
            for k in range(c, n + 1):
                M[i][k] -= f * M[c][k]
    x = [0.0] * n
    for i in range(n - 1, -1, -1):
        x[i] = (M[i][n] - sum(M[i][k] * x[k] for k in range(i + 1, n))) / M[i][i]
    return np.array(x)


full_rank = arrays(np.float64, st.tuples(st.integers(2, 7), st.integers(1, 3)), elements=st.floats(-5, 5)).filter(
    lambda M: M.shape[0] >= M.shape[1] and np.linalg.svd(M, compute_uv=False)[-1] > 1e-3 * max(1.0, np.abs(M).max())
)


class TestQrOrthonormalize:
    def test_canonical_columns_unchanged(self):
        I = np.eye(3)[:, :2]
        np.testing.assert_allclose(qr_orthonormalize(I), I, atol=1e-15)

    def test_single_column_normalized(self):
        np.testing.assert_allclose(qr_orthonormalize(np.array([[3.0], [4.0]]))[:, 0], [0.6, 0.8], atol=1e-15)

    def test_random_span_matches_lstsq_projector(self, rng):
        M = rng.standard_normal((5, 3))
        Q = qr_orthonormalize(M)
        np.testing.assert_allclose(Q.T @ Q, np.eye(3), atol=1e-10)
        # projector onto span(M) via an independent least-squares oracle
        P = M @ np.linalg.lstsq(M, np.eye(5), rcond=None)[0]
        assert np.linalg.norm(Q @ Q.T - P) < 1e-9

    def test_rank_deficient_raises(self):
        with pytest.raises(RankDeficient):
            qr_orthonormalize(np.array([[1.0, 2.0], [2.0, 4.0], [0.0, 0.0]]))

    @given(full_rank)
    def test_property_orthonormal_and_span_preserving(self, M):
        Q = qr_orthonormalize(M)
        assert np.abs(Q.T @ Q - np.eye(M.shape[1])).max() < 1e-10
        P = M @ np.linalg.pinv(M)
        assert np.linalg.norm(Q @ Q.T - P) < 1e-8


class TestSymmetricEig:
    def test_diagonal(self):
        np.testing.assert_allclose(symmetric_eig(np.diag([1.0, 3.0])).eigenvalues, [3.0, 1.0])

    def test_analytic_2x2(self):
        w, V = symmetric_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
        np.testing.assert_allclose(w, [3.0, 1.0], atol=1e-14)
        s = 1 / np.sqrt(2)
        assert abs(abs(V[:, 0] @ [s, s]) - 1) < 1e-12
        assert abs(abs(V[:, 1] @ [s, -s]) - 1) < 1e-12

    def test_reconstruction_6x6(self, rng):
        G = rng.standard_normal((6, 6))
        S = G.T @ G
        w, V = symmetric_eig(S)
        assert np.linalg.norm(S - (V * w) @ V.T) < 1e-8 * np.linalg.norm(S)
        assert np.all(np.diff(w) <= 0)

    def test_not_symmetric(self):
        with pytest.raises(NotSymmetric):
            symmetric_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))

    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.just(6)), elements=st.floats(-3, 3)))
    def test_property_trace_and_residual(self, G):
        S = G.T @ G + np.diag(np.arange(6.0))
        w, V = symmetric_eig(S)
        scale = max(np.linalg.norm(S), 1.0)
        assert abs(np.trace(S) - w.sum()) < 1e-8 * scale
        assert np.linalg.norm(S @ V - V * w) < 1e-8 * scale
        assert np.abs(V.T @ V - np.eye(6)).max() < 1e-10


class TestLeastSquares:
    def test_identity(self):
        np.testing.assert_allclose(least_squares(np.eye(2), np.array([1.0, 2.0])), [1.0, 2.0])

    def test_mean(self):
        np.testing.assert_allclose(least_squares(np.ones((2, 1)), np.array([0.0, 2.0])), [1.0])

    def test_ridge_matches_gaussian_elimination(self, rng):
        A = rng.standard_normal((20, 4))
        b = rng.standard_normal(20)
        x = least_squares(A, b, ridge=0.1)
        oracle = gauss_elim_solve(A.T @ A + 0.1 * np.eye(4), A.T @ b)
        np.testing.assert_allclose(x, oracle, atol=1e-9)

    def test_residual_gradient_small(self, rng):
        A = rng.standard_normal((30, 5))
        b = rng.standard_normal(30)
        x = least_squares(A, b, ridge=0.3)
        g = 2 * A.T @ (A @ x - b) + 2 * 0.3 * x
        assert np.linalg.norm(g) < 1e-8 * (1 + np.linalg.norm(b))

    def test_singular_raises(self):
        with pytest.raises(Singular):
            least_squares(np.array([[1.0, 1.0], [1.0, 1.0], [2.0, 2.0]]), np.ones(3))

    @given(arrays(np.float64, (4, 4), elements=st.floats(-3, 3)), arrays(np.float64, 4, elements=st.floats(-3, 3)))
    def test_property_square_exact(self, A, b):
        A = A + 6 * np.eye(4)
        np.testing.assert_allclose(least_squares(A, b), gauss_elim_solve(A, b), atol=1e-9)


class TestSubspaceSine:
    def test_equal(self):
        B = qr_orthonormalize(np.random.default_rng(0).standard_normal((5, 2)))
        assert subspace_sine(B, B) < 1e-7

    def test_orthogonal(self):
        assert subspace_sine(np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])) == pytest.approx(1.0)

    def test_45_degrees(self):
        s = 1 / np.sqrt(2)
        assert subspace_sine(np.array([[1.0], [0.0]]), np.array([[s], [s]])) == pytest.approx(s, abs=1e-12)

    def test_not_orthonormal(self):
        with pytest.raises(NotOrthonormal):
            subspace_sine(np.array([[2.0], [0.0]]), np.array([[1.0], [0.0]]))

    def test_rotation_within_span(self, rng):
        B = qr_orthonormalize(rng.standard_normal((6, 2)))
        c, s = np.cos(0.4), np.sin(0.4)
        assert subspace_sine(B, B @ np.array([[c, -s], [s, c]])) < 1e-7

    @given(st.integers(0, 10_000), st.integers(2, 6))
    def test_property_symmetric_and_principal_angle(self, seed, d):
        g = np.random.default_rng(seed)
        r = int(g.integers(1, d + 1))
        B1 = qr_orthonormalize(g.standard_normal((d, r)))
        B2 = qr_orthonormalize(g.standard_normal((d, r)))
        s12, s21 = subspace_sine(B1, B2), subspace_sine(B2, B1)
        assert abs(s12 - s21) < 1e-9
        cos = np.linalg.svd(B1.T @ B2, compute_uv=False)
        assert abs(s12 - np.sqrt(max(0.0, 1 - cos.min() ** 2))) < 1e-7


class TestHelpers:
    def test_check_orthonormal_passes_through(self):
        B = np.eye(3)[:, :2]
        assert check_orthonormal(B) is B

    def test_sym_pinv_rank_one(self):
        v = np.array([1.0, 2.0])
        S = np.outer(v, v)
        np.testing.assert_allclose(sym_pinv(S), S / 25.0, atol=1e-14)
