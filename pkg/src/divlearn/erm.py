"""Two-stage empirical risk minimization.

Train phase: joint minimization of the pooled empirical risk over a shared
representation and one head per training task. Test phase: a new head fitted
on top of the frozen representation. Also hosts the excess-risk evaluator and
the single-task baseline.
"""

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import rng as rng_mod
from .errors import BadOptions, Diverged, EmptyData, IncompatibleVariants
from .models import (
    Family,
    LinearHead,
    LinearSubspace,
    Loss,
    ModelClass,
    MonotoneLink,
    TanhMlp,
    UnitDirection,
    fit_link,
    grad_params,
    link_eval,
    link_slope,
    mlp_activations,
    loss_derivative,
    loss_value,
    predict,
    project_constraints,
    rep_arrays,
    rep_forward,
    rep_vjp,
    rep_with,
    sigmoid,
)
from .numlin import least_squares, qr_orthonormalize

log = logging.getLogger(__name__)

ARMIJO = 1e-4
MIN_STEP_RATIO = 1e-14


@dataclass(frozen=True)
class OptConfig:
    """Settings for the projected-gradient ERM solver."""

    max_iters: int = 5000
    step_size: float = 1.0
    step_decay: float = 0.5
    tol_grad: float = 1e-7
    restarts: int = 5
    seed: int = 0
    head_solve_every: int = 10
    trace: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise BadOptions("max_iters must be >= 1")
        if not self.step_size > 0:
            raise BadOptions("step_size must be positive")
        if not 0 < self.step_decay < 1:
            raise BadOptions("step_decay must lie in (0, 1)")
        if not self.tol_grad > 0:
            raise BadOptions("tol_grad must be positive")
        if self.restarts < 1 or self.head_solve_every < 1:
            raise BadOptions("restarts and head_solve_every must be >= 1")


@dataclass(frozen=True, eq=False)
class FitResult:
    rep: object
    heads: tuple
    final_empirical_risk: float
    iterations_used: int
    converged: bool
    trace: tuple = ()
    restart_risks: tuple = ()


class RiskEstimate(NamedTuple):
    value: float
    stderr: float


def write_trace(result, path):
    """Write the accepted-iteration trace as ``iter,risk,step,grad_norm``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "risk", "step", "grad_norm"])
        for it, risk, step, g in result.trace:
            w.writerow([it, format(risk, ".17g"), format(step, ".17g"), format(g, ".17g")])


def model_class_for(env):
    """The ERM search class matching an environment's truth."""
    rep = env.rep_truth
    if isinstance(rep, TanhMlp):
        hidden = tuple(W.shape[0] for W in rep.weights[:-1])
        return ModelClass(env.family, env.d, env.r, env.c1, hidden, tuple(rep.caps), env.W)
    return ModelClass(env.family, env.d, env.r, env.c1, direction_cap=env.W)


def _resolve_class(family, d, r):
    if isinstance(family, ModelClass):
        return family
    family = Family(family)
    if family is Family.INDEX_MODEL:
        r = 1
    if r is None:
        raise BadOptions("pass r or a ModelClass for linear-head families")
    return ModelClass(family, d, int(r))


# --------------------------------------------------------------------------
# stacked data


class _Stack:
    """Tasks padded to a common length; ``M`` masks the real rows."""

    def __init__(self, datasets):
        if len(datasets) == 0:
            raise EmptyData("no datasets")
        counts = np.array([ds.X.shape[0] for ds in datasets])
        if np.any(counts == 0):
            raise EmptyData("a dataset has no rows")
        d = datasets[0].X.shape[1]
        if any(ds.X.shape[1] != d for ds in datasets):
            raise BadOptions("datasets disagree on the covariate dimension")
        t, n = len(datasets), int(counts.max())
        self.X = np.zeros((t, n, d))
        self.Y = np.zeros((t, n))
        self.M = np.zeros((t, n))
        for j, ds in enumerate(datasets):
            self.X[j, : counts[j]] = ds.X
            self.Y[j, : counts[j]] = ds.y
            self.M[j, : counts[j]] = 1.0
        self.counts = counts
        self.N = float(counts.sum())
        self.t, self.n, self.d = t, n, d
        self.X2 = self.X.reshape(t * n, d)


def _features(rep, st):
    """Stacked features (t, n, r) plus cached activations for networks."""
    if isinstance(rep, LinearSubspace):
        return st.X @ rep.B, None
    acts = mlp_activations(rep.weights, st.X2)
    return acts[-1].reshape(st.t, st.n, -1), acts


# --------------------------------------------------------------------------
# ball-constrained head solvers, batched over tasks


def ball_least_squares(G, h, cap):
    """argmin 1/2 a'G_j a - h_j'a subject to ||a|| <= cap, for each j.

    Exact KKT solution: minimum-norm unconstrained solution when it fits in
    the ball, otherwise the ridge parameter is found by bisection on the
    secular equation ||a(lam)|| = cap.
    """
    w, V = np.linalg.eigh(G)
    c = np.einsum("tkr,tk->tr", V, h)
    tol = 1e-12 * np.maximum(w.max(axis=1, keepdims=True), 1e-300)
    inv0 = np.where(w > tol, 1.0 / np.where(w > tol, w, 1.0), 0.0)
    coef = c * inv0
    norms = np.linalg.norm(coef, axis=1)
    out = coef
    over = norms > cap
    if np.any(over):
        cc, ww = c[over], np.maximum(w[over], 0.0)
        lo = np.zeros(cc.shape[0])
        hi = np.linalg.norm(cc, axis=1) / cap
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            nm = np.linalg.norm(cc / (ww + mid[:, None]), axis=1)
            big = nm > cap
            lo = np.where(big, mid, lo)
            hi = np.where(big, hi, mid)
        sol = cc / (ww + hi[:, None])
        nrm = np.linalg.norm(sol, axis=1)
        sol = sol * np.minimum(1.0, cap / np.maximum(nrm, 1e-300))[:, None]
        out = out.copy()
        out[over] = sol
    return np.einsum("tkr,tr->tk", V, out)


def _logistic_obj(H, Y, M, A, lam):
    p = np.einsum("tnr,tr->tn", H, A)
    ell = np.logaddexp(0.0, p) - Y * p
    return np.sum(M * ell, axis=1) + 0.5 * lam * np.sum(A * A, axis=1)


def _newton_logistic(H, Y, M, lam, A, norm_limit=np.inf, iters=100):
    """Damped Newton on sum_i l(h_i'a, y_i) + lam/2 ||a||^2, batched."""
    t, _, r = H.shape
    A = A.copy()
    live = np.ones(t, dtype=bool)
    eye = np.eye(r)
    for _ in range(iters):
        if not live.any():
            break
        p = np.einsum("tnr,tr->tn", H, A)
        s = sigmoid(p)
        g = np.einsum("tnr,tn->tr", H, M * (s - Y)) + lam[:, None] * A
        w = M * s * (1.0 - s)
        Hs = np.einsum("tnr,tn,tns->trs", H, w, H) + (lam[:, None, None] + 1e-12) * eye
        D = np.linalg.solve(Hs, g[..., None])[..., 0]
        dec = np.einsum("tr,tr->t", g, D)
        live &= np.linalg.norm(D, axis=1) > 1e-13 * (1.0 + np.linalg.norm(A, axis=1))
        if not live.any():
            break
        f0 = _logistic_obj(H, Y, M, A, lam)
        # near the optimum the Armijo test drowns in rounding; take full steps
        full = live & (dec < 1e-8 * (1.0 + np.abs(f0)))
        A[full] = A[full] - D[full]
        step = np.ones(t)
        pending = live & ~full
        for _ in range(40):
            if not pending.any():
                break
            trial = A - step[:, None] * D
            f = _logistic_obj(H, Y, M, trial, lam)
            ok = pending & (f <= f0 - ARMIJO * step * dec)
            A[ok] = trial[ok]
            pending &= ~ok
            step = np.where(pending, 0.5 * step, step)
        live &= ~pending
        live &= np.linalg.norm(A, axis=1) <= norm_limit
    return A


def ball_logistic(H, Y, M, cap, A0=None):
    """Ball-constrained logistic regression per task, batched.

    The constraint is handled exactly through its multiplier: Newton on the
    ridge-penalized objective, with bisection on the ridge weight when the
    unconstrained minimizer leaves the ball.
    """
    t, _, r = H.shape
    A = np.zeros((t, r)) if A0 is None else np.array(A0, dtype=float)
    A = _newton_logistic(H, Y, M, np.zeros(t), A, norm_limit=10.0 * cap)
    over = np.linalg.norm(A, axis=1) > cap
    if not np.any(over):
        return A
    Ho, Yo, Mo = H[over], Y[over], M[over]
    k = Ho.shape[0]
    Ao = A[over] * (cap / np.linalg.norm(A[over], axis=1))[:, None]
    hi = np.ones(k)
    A_hi = _newton_logistic(Ho, Yo, Mo, hi, Ao)
    for _ in range(200):
        big = np.linalg.norm(A_hi, axis=1) > cap
        if not big.any():
            break
        hi = np.where(big, 2.0 * hi, hi)
        A_hi[big] = _newton_logistic(Ho[big], Yo[big], Mo[big], hi[big], A_hi[big])
    lo = np.zeros(k)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        A_mid = _newton_logistic(Ho, Yo, Mo, mid, A_hi)
        big = np.linalg.norm(A_mid, axis=1) > cap
        lo = np.where(big, mid, lo)
        hi = np.where(big, hi, mid)
        A_hi = np.where(big[:, None], A_hi, A_mid)
    nrm = np.linalg.norm(A_hi, axis=1)
    A_hi = A_hi * np.minimum(1.0, cap / np.maximum(nrm, 1e-300))[:, None]
    A = A.copy()
    A[over] = A_hi
    return A


def solve_heads(loss, H, Y, M, cap, A0=None):
    """Exact ball-constrained head fit for every task given features."""
    loss = Loss(loss)
    if loss is Loss.SQUARED:
        G = np.einsum("tnr,tn,tns->trs", H, M, H)
        h = np.einsum("tnr,tn->tr", H, M * Y)
        return ball_least_squares(G, h, cap)
    if loss is Loss.LOGISTIC:
        return ball_logistic(H, Y, M, cap, A0)
    raise IncompatibleVariants("exact head solves cover squared and logistic losses")


def _ball(A, cap):
    nrm = np.linalg.norm(A, axis=-1, keepdims=True)
    return A * np.minimum(1.0, cap / np.maximum(nrm, 1e-300))


# --------------------------------------------------------------------------
# linear-head families


def _linear_risk(loss, H, A, st):
    pred = np.einsum("tnr,tr->tn", H, A)
    return float(np.sum(st.M * loss_value(loss, pred, st.Y)) / st.N)


class _LinearObjective:
    def __init__(self, st, mc):
        self.st, self.mc, self.loss = st, mc, mc.loss

    def risk(self, rep, A):
        H, _ = _features(rep, self.st)
        return _linear_risk(self.loss, H, A, self.st)

    def grads(self, rep, A):
        st = self.st
        H, acts = _features(rep, st)
        pred = np.einsum("tnr,tr->tn", H, A)
        g = loss_derivative(self.loss, pred, st.Y) * st.M / st.N
        gA = np.einsum("tnr,tn->tr", H, g)
        FG = (g[..., None] * A[:, None, :]).reshape(st.t * st.n, -1)
        gR = rep_vjp(rep, st.X2, FG, acts=acts)
        return gR, gA, H


def _init_rep(mc, gen, stack=None):
    if mc.family is Family.NN_REGRESSION:
        widths = (mc.d,) + tuple(mc.hidden) + (mc.r,)
        ws = tuple(gen.standard_normal((widths[k + 1], widths[k])) / np.sqrt(widths[k]) for k in range(len(widths) - 1))
        return project_constraints(TanhMlp(ws, tuple(float(c) for c in mc.layer_caps)))
    if mc.family is Family.INDEX_MODEL:
        b = gen.standard_normal(mc.d)
        return UnitDirection(b * (mc.direction_cap / np.linalg.norm(b)), mc.direction_cap)
    return LinearSubspace(qr_orthonormalize(gen.standard_normal((mc.d, mc.r))))


def _descend_linear(st, mc, rep, opt):
    obj = _LinearObjective(st, mc)
    cap = mc.head_cap
    A = np.zeros((st.t, mc.r))
    risk = obj.risk(rep, A)
    if not np.isfinite(risk):
        raise Diverged("initial risk is not finite")
    step = opt.step_size
    max_step = 1e6 * opt.step_size
    min_step = MIN_STEP_RATIO * opt.step_size
    trace = [(0, risk, 0.0, np.nan)]
    converged = False
    it = 0
    for it in range(1, opt.max_iters + 1):
        if (it - 1) % opt.head_solve_every == 0:
            H, _ = _features(rep, st)
            A_new = solve_heads(mc.loss, H, st.Y, st.M, cap, A)
            r_new = _linear_risk(mc.loss, H, A_new, st)
            if r_new <= risk:
                A, risk = A_new, r_new
        gR, gA, _ = obj.grads(rep, A)
        arrays = rep_arrays(rep)
        accepted = False
        while step >= min_step:
            rep_t = project_constraints(rep_with(rep, [a - step * g for a, g in zip(arrays, gR)]))
            A_t = _ball(A - step * gA, cap)
            moved = sum(float(np.sum((a1 - a0) ** 2)) for a1, a0 in zip(rep_arrays(rep_t), arrays))
            moved += float(np.sum((A_t - A) ** 2))
            r_t = obj.risk(rep_t, A_t)
            if np.isfinite(r_t) and r_t <= risk - ARMIJO * moved / step:
                accepted = True
                break
            step *= opt.step_decay
        if not accepted:
            break
        gnorm = np.sqrt(moved) / step
        rep, A, risk = rep_t, A_t, r_t
        trace.append((it, risk, step, gnorm))
        if gnorm < opt.tol_grad:
            converged = True
            break
        step = min(step / opt.step_decay, max_step)
    # final exact head solve on the returned representation
    H, _ = _features(rep, st)
    A_new = solve_heads(mc.loss, H, st.Y, st.M, cap, A)
    r_new = _linear_risk(mc.loss, H, A_new, st)
    if r_new <= risk:
        A, risk = A_new, r_new
        trace.append((it, risk, 0.0, np.nan))
    heads = tuple(LinearHead(a.copy(), cap) for a in A)
    return rep, heads, risk, it, converged, trace


# --------------------------------------------------------------------------
# index family


def _index_risk(b, links, st):
    total = 0.0
    for j in range(st.t):
        k = st.counts[j]
        z = st.X[j, :k] @ b
        total += float(np.sum(np.abs(st.Y[j, :k] - link_eval(links[j], z))))
    return total / st.N


def _fit_links(b, st, knots=None):
    out = []
    for j in range(st.t):
        k = st.counts[j]
        out.append(fit_link(st.X[j, :k] @ b, st.Y[j, :k], knots=knots))
    return out


def _index_grad(b, links, st):
    g = np.zeros_like(b)
    for j in range(st.t):
        k = st.counts[j]
        Xj = st.X[j, :k]
        z = Xj @ b
        s = np.sign(link_eval(links[j], z) - st.Y[j, :k]) * link_slope(links[j], z)
        g += Xj.T @ s
    return g / st.N


def _moment_direction(st, cap):
    v = np.zeros(st.d)
    for j in range(st.t):
        k = st.counts[j]
        y = st.Y[j, :k]
        v += st.X[j, :k].T @ (y - y.mean())
    nrm = np.linalg.norm(v)
    return None if nrm == 0 else v * (cap / nrm)


def _descend_index(st, mc, rep, opt):
    cap = mc.direction_cap
    b = rep.b
    links = _fit_links(b, st, mc.link_knots)
    risk = _index_risk(b, links, st)
    if not np.isfinite(risk):
        raise Diverged("initial risk is not finite")
    step = opt.step_size
    max_step = 1e6 * opt.step_size
    min_step = MIN_STEP_RATIO * opt.step_size
    trace = [(0, risk, 0.0, np.nan)]
    converged = False
    it = 0
    for it in range(1, opt.max_iters + 1):
        if it > 1 and (it - 1) % opt.head_solve_every == 0:
            new = _fit_links(b, st, mc.link_knots)
            r_new = _index_risk(b, new, st)
            if r_new <= risk:
                links, risk = new, r_new
        g = _index_grad(b, links, st)
        accepted = False
        while step >= min_step:
            b_t = _ball(b - step * g, cap)
            moved = float(np.sum((b_t - b) ** 2))
            r_t = _index_risk(b_t, links, st)
            if np.isfinite(r_t) and r_t <= risk - ARMIJO * moved / step:
                accepted = True
                break
            step *= opt.step_decay
        if not accepted:
            break
        gnorm = np.sqrt(moved) / step
        b, risk = b_t, r_t
        trace.append((it, risk, step, gnorm))
        if gnorm < opt.tol_grad:
            converged = True
            break
        step = min(step / opt.step_decay, max_step)
    new = _fit_links(b, st, mc.link_knots)
    r_new = _index_risk(b, new, st)
    if r_new <= risk:
        links, risk = new, r_new
        trace.append((it, risk, 0.0, np.nan))
    return UnitDirection(b, cap), tuple(links), risk, it, converged, trace


# --------------------------------------------------------------------------
# public entry points


def train_phase_erm(datasets, family, opt=None, r=None):
    """Jointly fit a shared representation and per-task heads.

    Parameters
    ----------
    datasets : sequence of TaskDataset
        One dataset per training task.
    family : Family, str or ModelClass
        Model family; a ModelClass also fixes the caps searched over.
    opt : OptConfig, optional
    r : int, optional
        Representation width when ``family`` is not a ModelClass.

    Returns
    -------
    FitResult
        Best of ``opt.restarts`` projected-gradient runs.
    """
    opt = opt or OptConfig()
    st = _Stack(list(datasets))
    mc = _resolve_class(family, st.d, r)
    best, risks = None, []
    for k in range(opt.restarts):
        gen = rng_mod.stream(opt.seed, "erm-restart", k)
        if mc.family is Family.INDEX_MODEL:
            rep0 = _init_rep(mc, gen)
            if k == 0:
                b0 = _moment_direction(st, mc.direction_cap)
                if b0 is not None:
                    rep0 = UnitDirection(b0, mc.direction_cap)
            out = _descend_index(st, mc, rep0, opt)
        else:
            out = _descend_linear(st, mc, _init_rep(mc, gen), opt)
        risks.append(out[2])
        if best is None or out[2] < best[2]:
            best = out
    rep, heads, risk, iters, conv, trace = best
    return FitResult(rep, heads, risk, iters, conv, tuple(trace) if opt.trace else (), tuple(risks))


def test_phase_erm(dataset0, rep, family, opt=None, head_cap=None):
    """Fit only the new-task head with the representation frozen.

    A ModelClass ``family`` with ``link_knots`` fixes the link grid.
    """
    if dataset0.X.shape[0] == 0:
        raise EmptyData("test dataset has no rows")
    knots = family.link_knots if isinstance(family, ModelClass) else None
    family = family.family if isinstance(family, ModelClass) else Family(family)
    X, y = dataset0.X, dataset0.y
    if family is Family.INDEX_MODEL:
        if not isinstance(rep, UnitDirection):
            raise IncompatibleVariants("index models need a UnitDirection")
        return fit_link(X @ rep.b, y, knots=knots)
    cap = 2.0 if head_cap is None else float(head_cap)
    H = rep_forward(rep, X)
    if H.ndim == 1:
        H = H[:, None]
    if family is Family.LINEAR_LOGISTIC:
        A = ball_logistic(H[None], y[None], np.ones((1, y.shape[0])), cap)
        return LinearHead(A[0], cap)
    if H.shape[0] >= H.shape[1]:
        try:
            a = least_squares(H, y)
            if np.linalg.norm(a) <= cap:
                return LinearHead(a, cap)
        except Exception:
            pass
    A = ball_least_squares((H.T @ H)[None], (H.T @ y)[None], cap)
    return LinearHead(A[0], cap)


def isolation_baseline(dataset0, family, opt=None, r=None):
    """Single-task ERM over the composed class on the new task only.

    Returns ``(head, rep)``.
    """
    if dataset0.X.shape[0] == 0:
        raise EmptyData("test dataset has no rows")
    fit = train_phase_erm([dataset0], family, opt, r)
    return fit.heads[0], fit.rep


# --------------------------------------------------------------------------
# population excess risk


def pointwise_excess(loss, noise_scale, p_true, p_hat):
    """E[l(p_hat, y) - l(p_true, y) | x] under the environment's label law.

    Squared loss: (p_hat - p_true)^2. Logistic: the Bernoulli KL divergence.
    Absolute loss with uniform noise on [-a, a]: closed-form expectation.
    """
    loss = Loss(loss)
    p_true = np.asarray(p_true, dtype=float)
    p_hat = np.asarray(p_hat, dtype=float)
    if loss is Loss.SQUARED:
        return (p_hat - p_true) ** 2
    if loss is Loss.LOGISTIC:
        mu = sigmoid(p_true)
        # E[softplus(p) - y p] difference, y ~ Bern(mu)
        return (np.logaddexp(0.0, p_hat) - np.logaddexp(0.0, p_true)) - mu * (p_hat - p_true)
    u = np.abs(p_true - p_hat)
    a = noise_scale * np.sqrt(3.0)
    if a == 0.0:
        return u
    w = np.minimum(u, a)  # keeps w / a <= 1, so tiny a cannot overflow
    inside = 0.5 * (w * (w / a) + a)
    return np.where(u >= a, u, inside) - a / 2.0


def population_excess_risk(env, rep, head, n_eval=200_000, seed=0):
    """Monte Carlo estimate of R(f, h) - R(f*_0, h*) on the new task.

    The label noise is integrated exactly given each fresh covariate draw,
    which is the limit of common random numbers for both terms; the truth
    therefore scores exactly zero.
    """
    if n_eval < 1:
        raise BadOptions("n_eval must be >= 1")
    X, _ = env.covariates.sample(rng_mod.stream(seed, "eval-x", env.seed), int(n_eval))
    p_true = env.signal(0, X)
    p_hat = predict(rep, head, X)
    v = pointwise_excess(env.loss, env.noise_scale, p_true, p_hat)
    mean = float(v.mean())
    se = float(v.std(ddof=1) / np.sqrt(v.shape[0])) if v.shape[0] > 1 else 0.0
    return RiskEstimate(mean, se)


# --------------------------------------------------------------------------
# gradient audit


def _audit_instance(family, loss, gen):
    d = int(gen.integers(2, 6))
    n = int(gen.integers(3, 9))
    X = gen.standard_normal((n, d))
    if family is Family.INDEX_MODEL:
        b = gen.standard_normal(d)
        rep = UnitDirection(b / np.linalg.norm(b), 1.0)
        knots = np.sort(gen.uniform(-3, 3, size=int(gen.integers(3, 8))))
        values = np.sort(gen.uniform(0, 1, size=knots.shape[0]))
        head = MonotoneLink(knots, values)
    else:
        r = int(gen.integers(1, d + 1))
        if family is Family.NN_REGRESSION:
            widths = (d, int(gen.integers(2, 5)), int(gen.integers(2, 5)), r)
            ws = tuple(gen.standard_normal((widths[k + 1], widths[k])) for k in range(3))
            rep = TanhMlp(ws, (np.inf,) * 3)
        else:
            rep = LinearSubspace(gen.standard_normal((d, r)))
        head = LinearHead(gen.standard_normal(r))
    pred = predict(rep, head, X)
    if Loss(loss) is Loss.LOGISTIC:
        y = (gen.random(n) < 0.5).astype(float)
    else:
        y = pred + gen.standard_normal(n)
    return rep, head, X, y


def _fd_mask(family, loss, rep, head, X, y):
    pred = predict(rep, head, X)
    keep = np.ones(X.shape[0], dtype=bool)
    if Loss(loss) is Loss.ABSOLUTE:
        keep &= np.abs(y - pred) >= 1e-3
    if family is Family.INDEX_MODEL:
        z = X @ rep.b
        keep &= np.min(np.abs(z[:, None] - head.knots[None, :]), axis=1) >= 1e-3
    return keep


def finite_difference_audit(family, loss, trials=100, seed=0, h=1e-5):
    """Worst componentwise relative error of analytic vs central-difference gradients.

    Relative error of a component is ``|a - f| / max(|a|, |f|, s)`` with
    floor ``s = 1e-6 * (1 + max|a|)``. Rows at nondifferentiable points
    (absolute-loss ties within 1e-3, index values within 1e-3 of a knot)
    are excluded.
    """
    from .models import flatten, head_array, head_with, unflatten

    family = Family(family)
    worst = 0.0
    for k in range(trials):
        gen = rng_mod.stream(seed, "fd-audit", k)
        rep, head, X, y = _audit_instance(family, loss, gen)
        keep = _fd_mask(family, loss, rep, head, X, y)
        if not keep.any():
            continue
        X, y = X[keep], y[keep]
        gR, gH = grad_params(loss, rep, head, X, y)
        analytic = np.concatenate([flatten(gR), gH])
        like = rep_arrays(rep)
        theta = np.concatenate([flatten(like), head_array(head)])
        nr = theta.shape[0] - gH.shape[0]

        def f(vec):
            rp = rep_with(rep, unflatten(vec[:nr], like))
            hp = head_with(head, vec[nr:])
            return float(np.mean(loss_value(loss, predict(rp, hp, X), y)))

        fd = np.empty_like(theta)
        for i in range(theta.shape[0]):
            e = np.zeros_like(theta)
            e[i] = h
            fd[i] = (f(theta + e) - f(theta - e)) / (2 * h)
        floor = 1e-6 * (1.0 + np.abs(analytic).max())
        rel = np.abs(analytic - fd) / np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
        worst = max(worst, float(rel.max()))
    return worst
