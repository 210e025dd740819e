"""Small dense linear-algebra kernels.

Everything here is deterministic and written for the modest sizes this
package works with (feature dimension up to a few thousand, rank up to 64).
"""

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NoConvergence, NotOrthonormal, NotSymmetric, RankDeficient, Singular

PIVOT_TOL = 1e-12
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


def _as_matrix(M):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise ValueError("expected a 2-d array")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    return M


def qr_orthonormalize(M):
    """Orthonormal basis for the column span of ``M`` (d x r, d >= r).

    Modified Gram-Schmidt with one reorthogonalization pass. The sign of each
    column is fixed by the elimination order, so an already orthonormal input
    comes back unchanged up to rounding.

    Raises
    ------
    RankDeficient
        If a column norm after elimination drops below 1e-12.
    """
    A = _as_matrix(M)
    d, r = A.shape
    if r > d:
        raise RankDeficient(f"cannot orthonormalize {r} columns in dimension {d}")
    Q = A.copy()
    for j in range(r):
        v = Q[:, j]
        for _ in range(2):
            for i in range(j):
                v -= (Q[:, i] @ v) * Q[:, i]
        nv = np.linalg.norm(v)
        if nv < PIVOT_TOL:
            raise RankDeficient(f"column {j} has pivot norm {nv:.3e}")
        Q[:, j] = v / nv
    return Q


def qr_factor(M):
    """Return ``(Q, R)`` with ``M = Q @ R`` and ``R`` upper triangular."""
    A = _as_matrix(M)
    Q = qr_orthonormalize(A)
    R = np.triu(Q.T @ A)
    return Q, R


class Spectrum:
    """Eigen-decomposition of a symmetric matrix, eigenvalues descending."""

    __slots__ = ("eigenvalues", "eigenvectors")

    def __init__(self, eigenvalues, eigenvectors):
        self.eigenvalues = eigenvalues
        self.eigenvectors = eigenvectors

    def __iter__(self):
        yield self.eigenvalues
        yield self.eigenvectors

    def __repr__(self):
        return f"Spectrum(eigenvalues={self.eigenvalues!r})"


def symmetric_eig(S, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Cyclic Jacobi eigensolver for a small symmetric matrix.

    Sweeps over all (p, q) pairs until the off-diagonal Frobenius norm falls
    below ``tol * ||S||_F``.

    Returns
    -------
    Spectrum
        Eigenvalues sorted descending, eigenvectors as orthonormal columns.
    """
    A = _as_matrix(S).copy()
    n = A.shape[0]
    if A.shape[1] != n:
        raise NotSymmetric("matrix is not square")
    scale = np.abs(A).max() if A.size else 0.0
    if n and np.abs(A - A.T).max() >= 1e-10 * max(1.0, scale):
        raise NotSymmetric("matrix is not symmetric to 1e-10")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    fro = np.linalg.norm(A)
    if fro == 0.0 or n == 1:
        return Spectrum(np.diag(A).copy(), V)
    target = tol * fro
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                if tau == 0:
                    t = 1.0
                elif abs(tau) > 1e150:
                    t = 0.5 / tau
                else:
                    t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap = A[p, :].copy()
                aq = A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off > target:
            raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps")
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return Spectrum(w[order], V[:, order])


def sym_pinv(S, rel_tol=1e-10):
    """Pseudo-inverse of a symmetric PSD matrix via :func:`symmetric_eig`.

    Eigenvalues at or below ``rel_tol * lambda_max`` are treated as zero.
    """
    w, V = symmetric_eig(S)
    if w.size == 0 or w[0] <= 0:
        return np.zeros_like(np.asarray(S, dtype=float))
    keep = w > rel_tol * w[0]
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return (V * inv) @ V.T


def least_squares(A, b, ridge=0.0):
    """Solve ``argmin ||A x - b||^2 + ridge * ||x||^2``.

    Uses a QR factorization of the ridge-augmented system, so the normal
    equations are never formed explicitly.

    Raises
    ------
    Singular
        If ``ridge == 0`` and the condition estimate of ``A^T A`` exceeds 1e14.
    """
    A = _as_matrix(A)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    n, p = A.shape
    if b.shape[0] != n:
        raise ValueError("A and b have incompatible shapes")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    if ridge == 0.0:
        if n < p:
            raise Singular("underdetermined system without ridge")
        w = symmetric_eig(A.T @ A).eigenvalues
        if w[-1] <= 0 or w[0] / w[-1] > 1e14:
            raise Singular("A^T A is numerically singular")
        A_aug, b_aug = A, b
    else:
        A_aug = np.vstack([A, np.sqrt(ridge) * np.eye(p)])
        b_aug = np.concatenate([b, np.zeros(p)])
    try:
        Q, R = qr_factor(A_aug)
    except RankDeficient as exc:
        raise Singular(str(exc)) from exc
    return solve_triangular(R, Q.T @ b_aug, lower=False)


def check_orthonormal(B, tol=1e-8):
    B = _as_matrix(B)
    err = np.abs(B.T @ B - np.eye(B.shape[1])).max()
    if err > tol:
        raise NotOrthonormal(f"columns deviate from orthonormal by {err:.3e}")
    return B


def subspace_sine(B1, B2):
    """Sine of the largest principal angle between two column spans.

    Computed as the spectral norm of ``(I - B1 B1^T) B2`` through the Gram
    matrix of the residual.
    """
    B1 = check_orthonormal(B1)
    B2 = check_orthonormal(B2)
    if B1.shape[0] != B2.shape[0]:
        raise ValueError("subspaces live in different ambient dimensions")
    P = B2 - B1 @ (B1.T @ B2)
    G = P.T @ P
    lam = symmetric_eig(0.5 * (G + G.T)).eigenvalues[0]
    return float(min(1.0, np.sqrt(max(lam, 0.0))))


def largest_eigenvalue(S):
    return float(symmetric_eig(S).eigenvalues[0])


def smallest_eigenvalue(S):
    return float(symmetric_eig(S).eigenvalues[-1])
