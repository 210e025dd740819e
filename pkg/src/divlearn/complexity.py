"""Empirical Gaussian and Rademacher complexities.

Monte Carlo estimators with exact inner suprema where the class allows it,
closed-form bounds for the linear classes, and the chain-rule bound for the
composed multitask class with a direct estimator on tiny instances.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import rng as rng_mod
from .errors import BadClassSpec, BadDelta, NotLinear, TooLarge
from .models import Family, TanhMlp, mlp_activations, project_constraints, rep_vjp
from .numlin import symmetric_eig

DEFAULT_DRAWS = 2000
DEFAULT_GRID = 41
BLOCK = 4096


class InnerSolver(str, enum.Enum):
    EXACT_LINEAR = "exact_linear"
    EXACT_ORTHONORMAL = "exact_orthonormal"
    GRADIENT_ASCENT = "gradient_ascent"


@dataclass(frozen=True)
class ComplexityEstimate:
    mean: float
    stderr: float
    draws: int
    inner_solver: InnerSolver
    is_lower_bound: bool


# --------------------------------------------------------------------------
# class specifications


@dataclass(frozen=True)
class Singleton:
    """A single function; its complexity is zero."""


@dataclass(frozen=True)
class SignPair:
    """{z -> z, z -> -z} on scalar inputs."""


@dataclass(frozen=True)
class LinearBall:
    """{z -> a'z : ||a|| <= radius}."""

    radius: float = 1.0


@dataclass(frozen=True)
class OrthonormalFrames:
    """Vector-valued {z -> B'z : B has r orthonormal columns}."""

    r: int


@dataclass(frozen=True)
class TanhMlpClass:
    """Vector-valued tanh networks with per-layer row-l1 caps."""

    widths: tuple
    caps: tuple
    restarts: int = 16
    iters: int = 100


def _as_inputs(Z):
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2 or Z.shape[0] < 1:
        raise BadClassSpec("inputs must be an (N, dim) array with N >= 1")
    return Z


def _out_dim(spec, Z):
    if isinstance(spec, (Singleton, SignPair, LinearBall)):
        if isinstance(spec, SignPair) and Z.shape[1] != 1:
            raise BadClassSpec("the sign pair acts on scalar inputs")
        return 1
    if isinstance(spec, OrthonormalFrames):
        if not 1 <= spec.r <= Z.shape[1]:
            raise BadClassSpec("frame width must lie in [1, dim]")
        return spec.r
    if isinstance(spec, TanhMlpClass):
        if spec.widths[0] != Z.shape[1] or len(spec.caps) != len(spec.widths) - 1:
            raise BadClassSpec("network widths do not match the inputs")
        return spec.widths[-1]
    raise BadClassSpec(f"unknown class spec {spec!r}")


def _mlp_sup(spec, Z, G, gen):
    """Projected gradient ascent for sup_theta (1/N) sum_i <g_i, h_theta(z_i)>."""
    N = Z.shape[0]
    widths = spec.widths
    best = -np.inf
    for _ in range(spec.restarts):
        ws = tuple(gen.standard_normal((widths[k + 1], widths[k])) for k in range(len(widths) - 1))
        rep = project_constraints(TanhMlp(ws, tuple(spec.caps)))
        val = float(np.sum(G * mlp_activations(rep.weights, Z)[-1])) / N
        eta = 1.0
        for _ in range(spec.iters):
            grads = rep_vjp(rep, Z, G / N)
            moved = False
            while eta > 1e-8:
                cand = project_constraints(TanhMlp(tuple(W + eta * g for W, g in zip(rep.weights, grads)), rep.caps))
                v2 = float(np.sum(G * mlp_activations(cand.weights, Z)[-1])) / N
                if v2 > val:
                    rep, val, moved = cand, v2, True
                    break
                eta *= 0.5
            if not moved:
                break
            eta *= 2.0
        best = max(best, val)
    return best


def _block_values(spec, Z, noise):
    """Inner suprema for a block of noise draws of shape (b, N, k)."""
    N = Z.shape[0]
    if isinstance(spec, Singleton):
        return np.zeros(noise.shape[0])
    if isinstance(spec, SignPair):
        return np.abs(noise[:, :, 0] @ Z[:, 0]) / N
    if isinstance(spec, LinearBall):
        return spec.radius * np.linalg.norm(noise[:, :, 0] @ Z, axis=1) / N
    if isinstance(spec, OrthonormalFrames):
        V = np.einsum("nd,bnr->bdr", Z, noise)
        return np.linalg.svd(V, compute_uv=False).sum(axis=1) / N
    raise BadClassSpec(f"no block solver for {spec!r}")


def _solver(spec):
    if isinstance(spec, OrthonormalFrames):
        return InnerSolver.EXACT_ORTHONORMAL
    if isinstance(spec, TanhMlpClass):
        return InnerSolver.GRADIENT_ASCENT
    return InnerSolver.EXACT_LINEAR


def _estimate(spec, Z, M, seed, kind):
    Z = _as_inputs(Z)
    k = _out_dim(spec, Z)
    if M < 2:
        raise BadClassSpec("need at least two draws")
    N = Z.shape[0]
    vals = np.empty(M)
    for start in range(0, M, BLOCK):
        b = min(BLOCK, M - start)
        gen = rng_mod.stream(seed, kind, start // BLOCK)
        if kind == "gauss":
            noise = gen.standard_normal((b, N, k))
        else:
            noise = gen.choice(np.array([-1.0, 1.0]), size=(b, N, k))
        if isinstance(spec, TanhMlpClass):
            for i in range(b):
                vals[start + i] = _mlp_sup(spec, Z, noise[i], rng_mod.stream(seed, kind, "ascent", start + i))
        else:
            vals[start : start + b] = _block_values(spec, Z, noise)
    se = float(vals.std(ddof=1) / math.sqrt(M))
    return ComplexityEstimate(float(vals.mean()), se, int(M), _solver(spec), isinstance(spec, TanhMlpClass))


def mc_gaussian_complexity(class_spec, Z, M=DEFAULT_DRAWS, seed=0):
    """Monte Carlo estimate of E sup_q (1/N) sum_i <g_i, q(z_i)>, g_i ~ N(0, I)."""
    return _estimate(class_spec, Z, int(M), seed, "gauss")


def mc_rademacher_complexity(class_spec, Z, M=DEFAULT_DRAWS, seed=0):
    """As :func:`mc_gaussian_complexity` with independent random signs."""
    return _estimate(class_spec, Z, int(M), seed, "rademacher")


# --------------------------------------------------------------------------
# closed-form linear bounds


@dataclass(frozen=True)
class LinearBounds:
    gauss_H: float
    gauss_F_tasks: tuple
    gauss_F_test: float = None


def _top_eig_sum(X, r):
    w = symmetric_eig(X.T @ X / X.shape[0]).eigenvalues
    return float(np.sum(np.maximum(w[:r], 0.0)))


def linear_closed_forms(env, datasets, dataset0=None):
    """Closed-form complexity bounds for the linear classes.

    Returns
    -------
    LinearBounds
        ``gauss_H = r sqrt(tr Sigma_X) / sqrt(n t)`` over the pooled inputs;
        per-task ``c1 sqrt(sum_{i<=r} sigma_i(Sigma_Xj)) / sqrt(n)``; the same
        on the test inputs with ``m`` in place of ``n`` when given.
    """
    if env.family not in (Family.LINEAR_LOGISTIC, Family.LINEAR_REGRESSION):
        raise NotLinear("closed forms cover the linear families")
    X = np.concatenate([ds.X for ds in datasets])
    N = X.shape[0]
    r, c1 = env.r, env.c1
    tr = float(np.sum(X * X) / N)
    gauss_H = r * math.sqrt(tr) / math.sqrt(N)
    per_task = tuple(c1 * math.sqrt(_top_eig_sum(ds.X, r)) / math.sqrt(ds.X.shape[0]) for ds in datasets)
    test = None
    if dataset0 is not None:
        test = c1 * math.sqrt(_top_eig_sum(dataset0.X, r)) / math.sqrt(dataset0.X.shape[0])
    return LinearBounds(gauss_H, per_task, test)


# --------------------------------------------------------------------------
# chain rule


@dataclass(frozen=True)
class ChainRuleInputs:
    lip_F: float
    gauss_H: float
    gauss_F_worst: float
    D_X: float
    n: int
    t: int
    delta: float = None

    def __post_init__(self):
        for name in ("lip_F", "gauss_H", "gauss_F_worst", "D_X"):
            if not getattr(self, name) >= 0:
                raise BadDelta(f"{name} must be nonnegative")
        if self.n < 1 or self.t < 1:
            raise BadDelta("n and t must be positive")


@dataclass(frozen=True)
class ChainRuleBound:
    C: float
    bound_at_delta: float
    bound_default: float
    minimizer_form: float = None


def chain_rule_bound(inputs):
    """Evaluate the chain-rule bound on the composed class complexity.

    ``C = L(F) G(H) + max_Z G_Z(F)``. At a user ``delta`` the bound is
    ``4 delta + 64 C log(D_X / delta)``; at ``delta = D_X / (nt)^2`` it is
    ``4 D_X / (nt)^2 + 128 C log(nt)``; for ``0 < C <= D_X`` the closed
    optimized form ``64 (C + C log(D_X / C))`` is also returned.
    """
    C = inputs.lip_F * inputs.gauss_H + inputs.gauss_F_worst
    D, nt = inputs.D_X, inputs.n * inputs.t
    default = 4.0 * D / nt**2 + 128.0 * C * math.log(nt)
    at_delta = None
    if inputs.delta is not None:
        if not 0 < inputs.delta <= D:
            raise BadDelta("delta must lie in (0, D_X]")
        at_delta = 4.0 * inputs.delta + 64.0 * C * math.log(D / inputs.delta)
    minimizer = None
    if 0 < C <= D:
        minimizer = 64.0 * (C + C * math.log(D / C))
    elif C == 0:
        minimizer = 0.0
    return ChainRuleBound(C, default if at_delta is None else at_delta, default, minimizer)


# --------------------------------------------------------------------------
# tiny composed class


def _sphere_grid(d, grid):
    """Unit vectors covering a half-sphere (the objective is even)."""
    if d == 1:
        return np.array([[1.0]])
    th = np.linspace(0.0, np.pi, grid, endpoint=False)
    if d == 2:
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    ph = np.linspace(0.0, np.pi, grid)
    T, P = np.meshgrid(th, ph, indexing="ij")
    return np.stack([np.sin(P) * np.cos(T), np.sin(P) * np.sin(T), np.cos(P)], axis=-1).reshape(-1, 3)


def _check_tiny(datasets):
    t = len(datasets)
    d = datasets[0].X.shape[1]
    n = max(ds.X.shape[0] for ds in datasets)
    if d > 3 or t > 3 or n > 6:
        raise TooLarge(f"grid search needs d <= 3, t <= 3, n <= 6; got d={d}, t={t}, n={n}")
    return t, d, n


def composed_class_mc(datasets, c1=1.0, M=DEFAULT_DRAWS, seed=0, grid=DEFAULT_GRID):
    """Gaussian complexity of {(x, j) -> a_j b'x : ||b|| = 1, |a_j| <= c1}.

    For each draw the supremum over heads is explicit (a_j = c1 sign(b'u_j)
    with u_j = sum_i g_ji x_ji), leaving sup_b c1 sum_j |b'u_j| over the
    sphere: a grid over sphere angles, then sign-pattern ascent
    ``b <- normalize(sum_j sign(b'u_j) u_j)`` from the best grid point.
    Flagged as a lower bound.
    """
    t, d, _ = _check_tiny(datasets)
    N = sum(ds.X.shape[0] for ds in datasets)
    P = _sphere_grid(d, grid)
    vals = np.empty(M)
    gen = rng_mod.stream(seed, "composed")
    for m in range(M):
        U = np.stack([gen.standard_normal(ds.X.shape[0]) @ ds.X for ds in datasets])
        scores = np.abs(P @ U.T).sum(axis=1)
        b = P[int(np.argmax(scores))]
        val = float(scores.max())
        for _ in range(50):
            s = np.sign(U @ b)
            s[s == 0] = 1.0
            v = s @ U
            nv = np.linalg.norm(v)
            if nv == 0:
                break
            b_new = v / nv
            new_val = float(np.abs(U @ b_new).sum())
            if new_val <= val * (1.0 + 1e-15):
                val = max(val, new_val)
                break
            b, val = b_new, new_val
        vals[m] = c1 * val / N
    return ComplexityEstimate(float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(M)), int(M), InnerSolver.GRADIENT_ASCENT, True)


def composed_exact_sup(U, c1=1.0):
    """max over sign vectors s of c1 ||sum_j s_j u_j||, the exact inner supremum."""
    t = U.shape[0]
    best = 0.0
    for mask in range(1 << max(t - 1, 0)):
        s = np.array([1.0] + [1.0 if (mask >> k) & 1 else -1.0 for k in range(t - 1)])[:t]
        best = max(best, float(np.linalg.norm(s @ U)))
    return c1 * best


def chain_rule_inputs_tiny(datasets, c1=1.0, M=DEFAULT_DRAWS, seed=0, delta=None):
    """Chain-rule inputs for the tiny composed class.

    ``L(F) = c1``; ``G(H)`` is the exact-inner Monte Carlo complexity of the
    unit ball over the pooled inputs; the worst case over feature sets of the
    scalar head class is ``c1 sqrt(2/pi) max_j sigma_max(X_j) / n`` in closed
    form; ``D_X = 2 c1 sqrt(lambda_max(X'X) / (nt))``.
    """
    _check_tiny(datasets)
    X = np.concatenate([ds.X for ds in datasets])
    N = X.shape[0]
    t = len(datasets)
    n = N // t
    gH = mc_gaussian_complexity(LinearBall(1.0), X, M, seed).mean
    smax = max(math.sqrt(max(symmetric_eig(ds.X.T @ ds.X).eigenvalues[0], 0.0)) for ds in datasets)
    gF = c1 * math.sqrt(2.0 / math.pi) * smax / n
    lam = max(symmetric_eig(X.T @ X).eigenvalues[0], 0.0)
    D = 2.0 * c1 * math.sqrt(lam / N)
    return ChainRuleInputs(c1, gH, gF, D, n, t, delta)
