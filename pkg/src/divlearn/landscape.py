"""Factored low-rank recovery of the stacked head-times-representation matrix.

With linear heads the training tasks jointly define M* = A B*^T (t x d). Each
sample observes one row of M* through a random covariate. The factored
objective parameterizes M = U V^T and adds a balancing penalty; the learned
features are the column span of V.
"""

from dataclasses import dataclass

import numpy as np

from . import rng as rng_mod
from .erm import OptConfig
from .errors import BadOptions, DimMismatch, Diverged, EmptyData
from .models import LinearSubspace
from .numlin import qr_orthonormalize, symmetric_eig

ARMIJO = 1e-4


@dataclass(frozen=True, eq=False)
class FactoredParams:
    U: np.ndarray
    V: np.ndarray


@dataclass(frozen=True, eq=False)
class TaskSamples:
    """Samples with uniformly drawn task ids (0-based: id k is training task k + 1)."""

    task: np.ndarray
    X: np.ndarray
    y: np.ndarray

    @property
    def n(self):
        return self.X.shape[0]


@dataclass(frozen=True)
class IncoherenceReport:
    max_row_U_sq: float
    op_norm_U_sq: float
    op_norm_V_sq: float
    row_threshold: float
    op_threshold: float
    C0: float
    kappa_bar: float
    r: int
    sigma1_star: float
    t: int
    in_set: bool


@dataclass(frozen=True, eq=False)
class LowRankTruth:
    M: np.ndarray
    U: np.ndarray
    V: np.ndarray
    sigma1: float
    kappa_bar: float


def sample_task_samples(env, n, seed):
    """``n`` samples, each from a uniformly chosen training task (natural scale)."""
    if not env.linear_heads or not isinstance(env.rep_truth, LinearSubspace):
        raise BadOptions("factored recovery needs a linear-subspace environment")
    task = rng_mod.stream(seed, "lr-task", env.seed).integers(0, env.t, size=int(n))
    X, _ = env.covariates.sample(rng_mod.stream(seed, "lr-x", env.seed), int(n))
    A = env.head_matrix()
    signal = np.einsum("nd,dr,nr->n", X, env.rep_truth.B, A[task])
    y = signal.copy()
    if env.noise_scale > 0:
        a = env.noise_scale * np.sqrt(3.0)
        y = y + rng_mod.stream(seed, "lr-noise", env.seed).uniform(-a, a, size=int(n))
    return TaskSamples(task, X, y)


def low_rank_truth(env):
    """M* = A B*^T with balanced factors U* = X D^(1/2), V* = Y D^(1/2)."""
    A = env.head_matrix()
    M = A @ env.rep_truth.B.T
    Xs, s, Yt = np.linalg.svd(M, full_matrices=False)
    r = env.r
    root = np.sqrt(s[:r])
    w = symmetric_eig(A.T @ A / env.t).eigenvalues
    kappa = float(w[0] / w[-1]) if w[-1] > 0 else np.inf
    return LowRankTruth(M, Xs[:, :r] * root, Yt[:r].T * root, float(s[0]), kappa)


def _check(params, data, t):
    U, V = params.U, params.V
    if U.shape[0] != t or V.shape[0] != data.X.shape[1] or U.shape[1] != V.shape[1]:
        raise DimMismatch("factor shapes do not match (t, d, r)")
    if data.task.shape[0] and (data.task.min() < 0 or data.task.max() >= t):
        raise DimMismatch("task ids outside [0, t)")


def bm_objective_grad(params, data, t):
    """Value and gradients of the balanced factored objective.

    f(U, V) = (2/n) sum_i (sqrt(t) y_i - sqrt(t) u_{j_i}' V' x_i)^2
              + 1/2 ||U'U - V'V||_F^2,

    where ``y`` is on the natural scale, so U V' estimates A B*^T directly.
    """
    _check(params, data, t)
    U, V = params.U, params.V
    n = data.X.shape[0]
    st = np.sqrt(t)
    XV = data.X @ V
    Urow = U[data.task]
    resid = st * data.y - st * np.sum(Urow * XV, axis=1)
    D = U.T @ U - V.T @ V
    value = 0.5 * float(np.sum(D * D))
    gU = 2.0 * U @ D
    gV = -2.0 * V @ D
    if n:
        value += 2.0 / n * float(resid @ resid)
        w = -4.0 * st / n * resid
        rowgrad = w[:, None] * XV
        gU = gU + _segment_rows(rowgrad, data.task, t)
        gV = gV + data.X.T @ (w[:, None] * Urow)
    return value, gU, gV


def _segment_rows(rows, task, t):
    out = np.zeros((t, rows.shape[1]))
    for k in range(rows.shape[1]):
        out[:, k] = np.bincount(task, rows[:, k], minlength=t)
    return out


def bm_fit(data, t, d, r, opt=None, return_trace=False):
    """Backtracking gradient descent from a small random start; best of restarts.

    Initial entries are N(0, 1e-2 / sqrt(d r)) (variance). With
    ``return_trace`` the accepted-iteration trace of the winning restart is
    returned as well.
    """
    opt = opt or OptConfig()
    if data.X.shape[0] < 1:
        raise EmptyData("no samples")
    best, best_val, best_trace = None, np.inf, ()
    std = np.sqrt(1e-2 / np.sqrt(d * r))
    for k in range(opt.restarts):
        gen = rng_mod.stream(opt.seed, "bm-restart", k)
        p = FactoredParams(gen.normal(0.0, std, (t, r)), gen.normal(0.0, std, (d, r)))
        p, val, trace = _descend(p, data, t, opt)
        if val < best_val:
            best, best_val, best_trace = p, val, trace
    return (best, best_trace) if return_trace else best


def _descend(p, data, t, opt):
    val, gU, gV = bm_objective_grad(p, data, t)
    if not np.isfinite(val):
        raise Diverged("objective is not finite at the start")
    step = opt.step_size
    min_step = 1e-14 * opt.step_size
    trace = [(0, val, 0.0, np.nan)]
    for it in range(1, opt.max_iters + 1):
        g2 = float(np.sum(gU * gU) + np.sum(gV * gV))
        gnorm = np.sqrt(g2)
        if gnorm < opt.tol_grad:
            break
        accepted = False
        while step >= min_step:
            cand = FactoredParams(p.U - step * gU, p.V - step * gV)
            v2, gU2, gV2 = bm_objective_grad(cand, data, t)
            if np.isfinite(v2) and v2 <= val - ARMIJO * step * g2:
                accepted = True
                break
            step *= opt.step_decay
        if not accepted:
            break
        p, val, gU, gV = cand, v2, gU2, gV2
        trace.append((it, val, step, gnorm))
        step = min(step / opt.step_decay, 1e6 * opt.step_size)
    return p, val, tuple(trace)


def extract_features(params):
    """Orthonormal basis of the column span of V."""
    return qr_orthonormalize(params.V)


def incoherence_report(params, C0, kappa_bar, sigma1_star, t, r):
    """Evaluate the three inequalities defining the incoherent region."""
    U, V = np.asarray(params.U, float), np.asarray(params.V, float)
    row = float(np.max(np.sum(U * U, axis=1))) if U.size else 0.0
    opU = float(np.linalg.norm(U, 2) ** 2) if U.size else 0.0
    opV = float(np.linalg.norm(V, 2) ** 2) if V.size else 0.0
    row_thr = C0 * kappa_bar * r * sigma1_star / t
    op_thr = C0 * sigma1_star
    ok = row <= row_thr and opU <= op_thr and opV <= op_thr
    return IncoherenceReport(row, opU, opV, row_thr, op_thr, C0, kappa_bar, r, sigma1_star, t, bool(ok))
