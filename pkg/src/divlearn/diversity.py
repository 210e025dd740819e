"""Representation differences and task-diversity certificates.

For a candidate representation h', the task-averaged difference averages,
over the training tasks, the best excess risk any head can reach on top of
h'. The worst-case difference takes the supremum of the same quantity over
the new-task class F0. Both are available in closed form for linear
regression with Gaussian covariates and by Monte Carlo for every family.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from . import rng as rng_mod
from .envs import diversity_parameter
from .erm import ball_logistic, pointwise_excess
from .errors import Empty, MethodUnsupported, NotLinearGaussian
from .models import (
    Family,
    LinearSubspace,
    TanhMlp,
    UnitDirection,
    fit_link,
    quantile_knots,
    link_eval,
    rep_forward,
    sigmoid,
)
from .numlin import least_squares, symmetric_eig, sym_pinv

DEFAULT_N_EVAL = 200_000
DEFAULT_STARTS = 32
INDEX_KNOTS = 129
TINY = 1e-300


class Method(str, enum.Enum):
    CLOSED_FORM = "closed_form"
    MONTE_CARLO = "monte_carlo"


@dataclass(frozen=True, eq=False)
class SchurGap:
    """Covariance blocks of (h', h*) and the generalized Schur complement."""

    Lambda: np.ndarray
    Lambda_sc: np.ndarray
    sigma1: float
    trace_weighted: float


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float = 0.0
    is_lower_bound: bool = False


@dataclass(frozen=True)
class DiversityReport:
    sample_id: int
    method: Method
    nu_tilde: float
    d_avg: float
    d_worst: float
    nu_implied: float
    epsilon_used: float
    stderr_avg: float = 0.0
    stderr_worst: float = 0.0
    worst_is_lower_bound: bool = False


@dataclass(frozen=True)
class Certificate:
    """Outcome of checking d_worst <= d_avg / nu + eps on a finite sample.

    A finite sample of representations can only refute diversity; a
    ``nu_certified`` value is the largest nu consistent with the samples
    seen, not a proof for the whole class.
    """

    reports: tuple
    nu_certified: float
    nu_theory: float = None
    consistent: bool = True


# --------------------------------------------------------------------------
# closed forms


def _require_linear_gaussian(env, rep_hat):
    if env.family is not Family.LINEAR_REGRESSION or env.covariates.radius is not None:
        raise NotLinearGaussian("closed forms need linear regression with untruncated Gaussian covariates")
    if not isinstance(rep_hat, LinearSubspace) or not isinstance(env.rep_truth, LinearSubspace):
        raise NotLinearGaussian("closed forms need linear-subspace representations")


def schur_gap(env, rep_hat):
    """Generalized Schur complement of h' inside the joint feature covariance."""
    _require_linear_gaussian(env, rep_hat)
    S = env.Sigma
    Bh, Bs = rep_hat.B, env.rep_truth.B
    F_hh = Bh.T @ S @ Bh
    F_hs = Bh.T @ S @ Bs
    F_ss = Bs.T @ S @ Bs
    Lam = np.block([[F_hh, F_hs], [F_hs.T, F_ss]])
    sc = F_ss - F_hs.T @ sym_pinv(0.5 * (F_hh + F_hh.T), rel_tol=1e-10) @ F_hs
    sc = 0.5 * (sc + sc.T)
    A = env.head_matrix()
    C = A.T @ A / env.t
    return SchurGap(Lam, sc, float(symmetric_eig(sc).eigenvalues[0]), float(np.trace(sc @ C)))


# --------------------------------------------------------------------------
# Monte Carlo building blocks


def _truth_features(env, X):
    return rep_forward(env.rep_truth, X)


def _hat_features(rep_hat, X):
    H = rep_forward(rep_hat, X)
    return H[:, None] if H.ndim == 1 else H


def _mc_squared_task(env, rep_hat, j, X):
    p = env.signal(j, X)
    H = _hat_features(rep_hat, X)
    a = least_squares(H, p, ridge=0.0) if _well_posed(H) else least_squares(H, p, ridge=1e-12 * len(p))
    v = (H @ a - p) ** 2
    return v


def _well_posed(H):
    w = symmetric_eig(H.T @ H).eigenvalues
    return w[-1] > 0 and w[0] / w[-1] < 1e12


def _mc_logistic_task(env, rep_hat, j, X, warm=None):
    p = env.signal(j, X)
    H = _hat_features(rep_hat, X)
    mu = sigmoid(p)
    a = ball_logistic(H[None], mu[None], np.ones((1, len(p))), np.inf, None if warm is None else warm[None])[0]
    return pointwise_excess("logistic", 0.0, p, H @ a), a


def _mc_index_task(env, rep_hat, j, X):
    p = env.signal(j, X)
    zh = X @ rep_hat.b
    # a finer grid than ERM uses, merged with the truth's own knots, so the
    # restriction to piecewise-linear links costs as little as possible
    knots = np.union1d(quantile_knots(zh, INDEX_KNOTS), env.heads_truth[j].knots)
    link = fit_link(zh, p, knots=knots)
    return pointwise_excess("absolute", env.noise_scale, p, link_eval(link, zh))


def _mean_se(v):
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.shape[0])) if v.shape[0] > 1 else 0.0


def _index_task_values(env, rep_hat, n_eval, seed):
    X, _ = env.covariates.sample(rng_mod.stream(seed, "div-index", env.seed), n_eval)
    vals = [_mean_se(_mc_index_task(env, rep_hat, j, X)) for j in range(1, env.t + 1)]
    return np.array([v for v, _ in vals]), np.array([s for _, s in vals])


def _check_method(env, method):
    method = Method(method)
    if method is Method.CLOSED_FORM and env.family is not Family.LINEAR_REGRESSION:
        raise MethodUnsupported("closed forms exist only for linear regression")
    return method


# --------------------------------------------------------------------------
# task-averaged difference


def task_avg_difference(env, rep_hat, n_eval=DEFAULT_N_EVAL, seed=0, method=Method.MONTE_CARLO):
    """Average over training tasks of the best excess risk on top of ``rep_hat``.

    Returns
    -------
    Estimate
        Closed form: ``tr(Lambda_sc C)`` with ``C = A^T A / t``, stderr 0.
        Monte Carlo: ``n_eval`` fresh covariates per task; the inner
        infimum over heads is solved on the sample (least squares, Newton
        on soft labels, or link projection).
    """
    method = _check_method(env, method)
    if method is Method.CLOSED_FORM:
        return Estimate(schur_gap(env, rep_hat).trace_weighted)
    if env.family is Family.INDEX_MODEL:
        vals, ses = _index_task_values(env, rep_hat, n_eval, seed)
        return Estimate(float(vals.mean()), float(np.sqrt(np.sum(ses**2)) / env.t))
    means, ses = [], []
    for j in range(1, env.t + 1):
        X, _ = env.covariates.sample(rng_mod.stream(seed, "div-avg", env.seed, j), n_eval)
        if env.family is Family.LINEAR_LOGISTIC:
            v, _ = _mc_logistic_task(env, rep_hat, j, X)
        else:
            v = _mc_squared_task(env, rep_hat, j, X)
        m, s = _mean_se(v)
        means.append(m)
        ses.append(s)
    return Estimate(float(np.mean(means)), float(np.sqrt(np.sum(np.square(ses))) / env.t))


# --------------------------------------------------------------------------
# worst-case difference


def _sphere_starts(gen, k, r, radius):
    S = gen.standard_normal((k, r))
    return radius * S / np.linalg.norm(S, axis=1, keepdims=True)


def _ascend(value_grad, a0, radius, iters=200, tol=1e-12):
    """Projected gradient ascent on the sphere with step halving."""
    a = a0
    val, g, aux = value_grad(a, None)
    eta = 1.0
    for _ in range(iters):
        improved = False
        while eta > 1e-12:
            cand = a + eta * g
            nrm = np.linalg.norm(cand)
            if nrm == 0:
                eta *= 0.5
                continue
            cand = cand * (radius / nrm)
            v2, g2, aux2 = value_grad(cand, aux)
            if v2 > val:
                improved = True
                break
            eta *= 0.5
        if not improved:
            break
        gain = v2 - val
        a, val, g, aux = cand, v2, g2, aux2
        eta = min(2.0 * eta, 1e6)
        if gain <= tol * max(1.0, abs(val)):
            break
    return a, val


def worst_case_difference(env, rep_hat, c2=None, n_eval=DEFAULT_N_EVAL, seed=0, method=Method.MONTE_CARLO, starts=DEFAULT_STARTS):
    """Supremum over the new-task class of the best excess risk on ``rep_hat``.

    F0 is the ball of radius ``c2`` for linear heads and the convex hull of
    the training links for index models.

    Returns
    -------
    Estimate
        Closed form: ``c2**2 * sigma1(Lambda_sc)``, the exact supremum of the
        quadratic form over the ball. Monte Carlo: best of ``starts``
        sphere-uniform ascent runs, flagged as a lower bound; for index
        models the supremum sits at a hull vertex and is enumerated exactly.
    """
    method = _check_method(env, method)
    c2 = env.c2 if c2 is None else float(c2)
    if method is Method.CLOSED_FORM:
        return Estimate(c2 * c2 * schur_gap(env, rep_hat).sigma1)
    if env.family is Family.INDEX_MODEL:
        vals, ses = _index_task_values(env, rep_hat, n_eval, seed)
        k = int(np.argmax(vals))
        return Estimate(float(vals[k]), float(ses[k]), False)
    X, _ = env.covariates.sample(rng_mod.stream(seed, "div-worst", env.seed), n_eval)
    Zs = _truth_features(env, X)
    Zs = Zs[:, None] if Zs.ndim == 1 else Zs
    H = _hat_features(rep_hat, X)
    n = X.shape[0]
    gen = rng_mod.stream(seed, "div-worst-starts", env.seed)
    A0 = _sphere_starts(gen, starts, Zs.shape[1], c2)

    if env.family is Family.LINEAR_LOGISTIC:

        def value_grad(a0, warm):
            p0 = Zs @ a0
            mu = sigmoid(p0)
            a = ball_logistic(H[None], mu[None], np.ones((1, n)), np.inf, None if warm is None else warm[None])[0]
            ph = H @ a
            v = pointwise_excess("logistic", 0.0, p0, ph)
            g = Zs.T @ (mu * (1.0 - mu) * (p0 - ph)) / n
            return float(v.mean()), g, a

        best_val, best_a = -np.inf, None
        for a0 in A0:
            a, val = _ascend(value_grad, a0, c2)
            if val > best_val:
                best_val, best_a = val, a
        p0 = Zs @ best_a
        _, _, a = value_grad(best_a, None)
        v = pointwise_excess("logistic", 0.0, p0, H @ a)
        return Estimate(float(v.mean()), _mean_se(v)[1], True)

    # squared loss: the inner infimum is a quadratic form in a0 built from
    # the sample second moments, so each evaluation is exact and cheap
    G_hh = H.T @ H / n
    G_hs = H.T @ Zs / n
    G_ss = Zs.T @ Zs / n
    P = sym_pinv(0.5 * (G_hh + G_hh.T), rel_tol=1e-10) @ G_hs
    Q = G_ss - G_hs.T @ P
    Q = 0.5 * (Q + Q.T)

    def value_grad(a0, _aux):
        return float(a0 @ Q @ a0), 2.0 * Q @ a0, None

    best_val, best_a = -np.inf, None
    for a0 in A0:
        a, val = _ascend(value_grad, a0, c2)
        if val > best_val:
            best_val, best_a = val, a
    resid = Zs @ best_a - H @ (P @ best_a)
    v = resid**2
    return Estimate(float(v.mean()), _mean_se(v)[1], True)


# --------------------------------------------------------------------------
# certificate


def hull_distance(env):
    """Sup-norm distance (on the knot grid) from the new-task link to the hull of the training links."""
    if env.family is not Family.INDEX_MODEL:
        return 0.0
    V = np.stack([h.values for h in env.heads_truth[1:]], axis=1)
    v0 = env.heads_truth[0].values
    K, t = V.shape
    # variables (lam_1..lam_t, s): minimize s with |V lam - v0| <= s
    c = np.concatenate([np.zeros(t), [1.0]])
    A_ub = np.block([[V, -np.ones((K, 1))], [-V, -np.ones((K, 1))]])
    b_ub = np.concatenate([v0, -v0])
    A_eq = np.concatenate([np.ones(t), [0.0]])[None, :]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0], bounds=[(0, None)] * (t + 1), method="highs")
    return float(max(res.x[-1], 0.0))


def implied_nu(d_avg, d_worst, epsilon):
    gap = d_worst - epsilon
    if gap <= 0:
        return math.inf
    return d_avg / max(gap, TINY)


def diversity_certificate(env, rep_hat_samples, epsilon=None, n_eval=DEFAULT_N_EVAL, seed=0, method=None, starts=DEFAULT_STARTS, rel_tol=1e-9):
    """Check the diversity inequality on a finite set of representations.

    Parameters
    ----------
    epsilon : float, optional
        Additive slack; 0 for linear heads and the measured hull distance
        for index models when omitted.
    method : Method, optional
        Closed form by default for linear regression, Monte Carlo otherwise.
    rel_tol : float
        Relative slack used when comparing against the theoretical nu.

    Returns
    -------
    Certificate
    """
    samples = list(rep_hat_samples)
    if not samples:
        raise Empty("no representations supplied")
    if method is None:
        method = Method.CLOSED_FORM if env.family is Family.LINEAR_REGRESSION and env.covariates.radius is None else Method.MONTE_CARLO
    method = _check_method(env, method)
    eps = hull_distance(env) if epsilon is None else float(epsilon)
    nu_t = diversity_parameter(env, allow_bound=True)
    reports = []
    for k, rep in enumerate(samples):
        s = rng_mod.stream(seed, "cert", k).integers(0, 2**63)
        avg = task_avg_difference(env, rep, n_eval, int(s), method)
        worst = worst_case_difference(env, rep, env.c2, n_eval, int(s), method, starts)
        reports.append(
            DiversityReport(
                k, method, nu_t, avg.value, worst.value, implied_nu(avg.value, worst.value, eps), eps,
                avg.stderr, worst.stderr, worst.is_lower_bound,
            )
        )
    nu_cert = min(r.nu_implied for r in reports)
    nu_theory = None
    consistent = True
    if env.linear_heads and env.family is Family.LINEAR_REGRESSION:
        nu_theory = nu_t / env.c2**2
        for r in reports:
            slack = rel_tol * r.d_avg + 3.0 * math.hypot(r.stderr_avg, r.stderr_worst / nu_theory if nu_theory > 0 else 0.0)
            if r.d_worst * nu_theory > r.d_avg + slack + 1e-15:
                consistent = False
    elif env.family is Family.INDEX_MODEL:
        nu_theory = 1.0 / env.t
        consistent = nu_cert >= nu_theory * (1.0 - rel_tol)
    return Certificate(tuple(reports), nu_cert, nu_theory, consistent)


def report_rows(certificate):
    """CSV rows ``sample_id,method,d_avg,d_worst,stderr_avg,stderr_worst,nu_implied``."""
    return [
        (r.sample_id, r.method.value, r.d_avg, r.d_worst, r.stderr_avg, r.stderr_worst, r.nu_implied)
        for r in certificate.reports
    ]


# --------------------------------------------------------------------------
# GLM curvature


def logistic_curvature(z):
    """Second derivative of the log-partition log(1 + e^z)."""
    s = sigmoid(z)
    return s * (1.0 - s)


def bernoulli_kl(z_true, z_hat):
    """KL(Bern(sigmoid(z_true)) || Bern(sigmoid(z_hat)))."""
    z_true = np.asarray(z_true, dtype=float)
    z_hat = np.asarray(z_hat, dtype=float)
    return np.logaddexp(0.0, z_hat) - np.logaddexp(0.0, z_true) - sigmoid(z_true) * (z_hat - z_true)


def glm_curvature_bounds(z_hat, z_true):
    """Coefficients (lower, upper) with lower * D^2 / 2 <= KL <= upper * D^2 / 2.

    ``D = z_hat - z_true``; the curvature of the logistic log-partition lies
    between exp(-|z|) / 4 and 1/4 on the segment joining the two points.
    """
    z_hat = np.asarray(z_hat, dtype=float)
    z_true = np.asarray(z_true, dtype=float)
    lower = 0.25 * np.exp(-np.maximum(np.abs(z_hat), np.abs(z_true)))
    upper = np.full(np.broadcast(z_hat, z_true).shape, 0.25)
    if lower.ndim == 0:
        return float(lower), 0.25
    return lower, upper
