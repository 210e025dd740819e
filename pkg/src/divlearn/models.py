"""Hypothesis classes for the four model families.

Representations map covariates to features, heads map features to a scalar
prediction. All parameter containers are frozen; every update returns a new
object. Gradients are hand-derived for each family and are gradients of the
*mean* loss over the rows passed in.
"""

import enum
import functools
import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import lsq_linear

from .errors import BadLabel, DimMismatch, Empty, IncompatibleVariants
from .numlin import qr_orthonormalize

log = logging.getLogger(__name__)

DEFAULT_KNOTS = 33


class Family(str, enum.Enum):
    LINEAR_LOGISTIC = "linear_logistic"
    LINEAR_REGRESSION = "linear_regression"
    NN_REGRESSION = "nn_regression"
    INDEX_MODEL = "index_model"


class Loss(str, enum.Enum):
    LOGISTIC = "logistic"
    SQUARED = "squared"
    ABSOLUTE = "absolute"


FAMILY_LOSS = {
    Family.LINEAR_LOGISTIC: Loss.LOGISTIC,
    Family.LINEAR_REGRESSION: Loss.SQUARED,
    Family.NN_REGRESSION: Loss.SQUARED,
    Family.INDEX_MODEL: Loss.ABSOLUTE,
}


# --------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True, eq=False)
class LinearSubspace:
    """h(x) = B^T x with B (d x r) having orthonormal columns."""

    B: np.ndarray

    @property
    def d(self):
        return self.B.shape[0]

    @property
    def r(self):
        return self.B.shape[1]


@dataclass(frozen=True, eq=False)
class TanhMlp:
    """h(x) = W_K tanh(W_{K-1} ... tanh(W_1 x)); last layer is linear.

    ``caps[k]`` bounds the max-row-l1 norm of ``weights[k]``; the last cap
    also bounds the infinity-to-2 operator norm of the last layer.
    """

    weights: tuple
    caps: tuple

    @property
    def d(self):
        return self.weights[0].shape[1]

    @property
    def r(self):
        return self.weights[-1].shape[0]


@dataclass(frozen=True, eq=False)
class UnitDirection:
    """h(x) = b^T x with ||b|| <= cap."""

    b: np.ndarray
    cap: float = 1.0

    @property
    def d(self):
        return self.b.shape[0]

    @property
    def r(self):
        return 1


@dataclass(frozen=True, eq=False)
class LinearHead:
    alpha: np.ndarray
    cap: float = np.inf


@dataclass(frozen=True, eq=False)
class MonotoneLink:
    """Piecewise-linear link through ``(knots[i], values[i])``.

    Linear interpolation between knots, constant beyond the end knots.
    """

    knots: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class ModelClass:
    """Hyperparameters of the classes F and H searched by ERM."""

    family: Family
    d: int
    r: int
    head_cap: float = 2.0
    hidden: tuple = (16,)
    layer_caps: tuple = (2.0, 4.0)
    direction_cap: float = 1.0
    link_knots: np.ndarray = field(default=None, compare=False)

    @property
    def loss(self):
        return FAMILY_LOSS[self.family]

    @property
    def linear_heads(self):
        return self.family is not Family.INDEX_MODEL


# --------------------------------------------------------------------------
# forward maps


def _rows(X, d):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X2 = X[None, :] if single else X
    if X2.ndim != 2 or X2.shape[1] != d:
        raise DimMismatch(f"expected inputs of dimension {d}, got shape {X.shape}")
    return X2, single


def mlp_activations(weights, X):
    acts = [X]
    a = X
    for k, W in enumerate(weights):
        pre = a @ W.T
        a = pre if k == len(weights) - 1 else np.tanh(pre)
        acts.append(a)
    return acts


def rep_forward(rep, X):
    """Apply a representation to one input (d,) or a batch (n, d)."""
    X2, single = _rows(X, rep.d)
    if isinstance(rep, LinearSubspace):
        out = X2 @ rep.B
    elif isinstance(rep, TanhMlp):
        out = mlp_activations(rep.weights, X2)[-1]
    elif isinstance(rep, UnitDirection):
        out = X2 @ rep.b
    else:
        raise IncompatibleVariants(f"unknown representation {type(rep).__name__}")
    return out[0] if single else out


def _interp_index(z, knots):
    """Segment index and in-segment weight for each z (clamped to the grid)."""
    K = knots.shape[0]
    zc = np.clip(z, knots[0], knots[-1])
    idx = np.searchsorted(knots, zc, side="right") - 1
    idx = np.clip(idx, 0, K - 2)
    w = (zc - knots[idx]) / (knots[idx + 1] - knots[idx])
    return idx, w


def link_eval(link, z):
    z = np.asarray(z, dtype=np.float64)
    if link.knots.shape[0] == 1:
        return np.full(z.shape, link.values[0])
    return np.interp(z, link.knots, link.values)


def link_slope(link, z):
    """Derivative of the link in z; zero outside the knot range."""
    z = np.asarray(z, dtype=np.float64)
    if link.knots.shape[0] == 1:
        return np.zeros(z.shape)
    idx, _ = _interp_index(z, link.knots)
    slopes = np.diff(link.values) / np.diff(link.knots)
    s = slopes[idx]
    return np.where((z < link.knots[0]) | (z > link.knots[-1]), 0.0, s)


def _check_pair(rep, head):
    if isinstance(head, LinearHead):
        if not isinstance(rep, (LinearSubspace, TanhMlp)):
            raise IncompatibleVariants("linear heads need a vector-valued representation")
        if head.alpha.shape[0] != rep.r:
            raise DimMismatch("head and representation widths differ")
    elif isinstance(head, MonotoneLink):
        if not isinstance(rep, UnitDirection):
            raise IncompatibleVariants("monotone links need a scalar index representation")
    else:
        raise IncompatibleVariants(f"unknown head {type(head).__name__}")


def predict(rep, head, X):
    _check_pair(rep, head)
    feats = rep_forward(rep, X)
    if isinstance(head, LinearHead):
        return feats @ head.alpha
    out = link_eval(head, feats)
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# losses


def _softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def loss_value(loss, pred, y):
    """Pointwise loss; vectorized over matching ``pred`` and ``y``."""
    loss = Loss(loss)
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if loss is Loss.LOGISTIC:
        if not np.all((y == 0) | (y == 1)):
            raise BadLabel("logistic loss needs labels in {0, 1}")
        out = np.log1p(np.exp(-np.abs(pred))) + np.maximum(pred, 0.0) - y * pred
    elif loss is Loss.SQUARED:
        out = (y - pred) ** 2
    else:
        out = np.abs(y - pred)
    return float(out) if out.ndim == 0 else out


def loss_derivative(loss, pred, y):
    """d loss / d pred. The absolute loss uses subgradient 0 at a tie."""
    loss = Loss(loss)
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if loss is Loss.LOGISTIC:
        return sigmoid(pred) - y
    if loss is Loss.SQUARED:
        return 2.0 * (pred - y)
    return np.sign(pred - y)


def empirical_risk(loss, pred, y):
    return float(np.mean(loss_value(loss, pred, y)))


# --------------------------------------------------------------------------
# gradients


def rep_vjp(rep, X2, feats_grad, acts=None):
    """Gradient of sum_i <feats_grad_i, h(x_i)> w.r.t. representation params."""
    if isinstance(rep, LinearSubspace):
        return (X2.T @ feats_grad,)
    if isinstance(rep, UnitDirection):
        return (X2.T @ feats_grad,)
    weights = rep.weights
    if acts is None:
        acts = mlp_activations(weights, X2)
    grads = [None] * len(weights)
    delta = feats_grad
    for k in range(len(weights) - 1, -1, -1):
        grads[k] = delta.T @ acts[k]
        if k > 0:
            delta = (delta @ weights[k]) * (1.0 - acts[k] ** 2)
    return tuple(grads)


def grad_params(loss, rep, head, X, y):
    """Gradients of the mean loss over the given rows.

    Returns
    -------
    rep_grad : tuple of arrays
        Same layout as :func:`rep_arrays` of ``rep``.
    head_grad : array
        Same layout as :func:`head_array` of ``head``.
    """
    _check_pair(rep, head)
    X2, _ = _rows(X, rep.d)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    n = X2.shape[0]
    if isinstance(head, LinearHead):
        if isinstance(rep, TanhMlp):
            acts = mlp_activations(rep.weights, X2)
            feats = acts[-1]
        else:
            acts = None
            feats = X2 @ rep.B
        pred = feats @ head.alpha
        g = loss_derivative(loss, pred, y) / n
        head_grad = feats.T @ g
        rep_grad = rep_vjp(rep, X2, np.outer(g, head.alpha), acts=acts)
        return rep_grad, head_grad
    z = X2 @ rep.b
    pred = link_eval(head, z)
    g = loss_derivative(loss, pred, y) / n
    rep_grad = (X2.T @ (g * link_slope(head, z)),)
    K = head.knots.shape[0]
    if K == 1:
        head_grad = np.array([g.sum()])
    else:
        idx, w = _interp_index(z, head.knots)
        head_grad = np.bincount(idx, g * (1 - w), minlength=K) + np.bincount(idx + 1, g * w, minlength=K)
    return rep_grad, head_grad


# --------------------------------------------------------------------------
# flat parameter access


def rep_arrays(rep):
    if isinstance(rep, LinearSubspace):
        return (rep.B,)
    if isinstance(rep, UnitDirection):
        return (rep.b,)
    return tuple(rep.weights)


def rep_with(rep, arrays):
    if isinstance(rep, LinearSubspace):
        return LinearSubspace(np.array(arrays[0], dtype=float))
    if isinstance(rep, UnitDirection):
        return UnitDirection(np.array(arrays[0], dtype=float), rep.cap)
    return TanhMlp(tuple(np.array(a, dtype=float) for a in arrays), rep.caps)


def head_array(head):
    return head.alpha if isinstance(head, LinearHead) else head.values


def head_with(head, array):
    if isinstance(head, LinearHead):
        return LinearHead(np.array(array, dtype=float), head.cap)
    return MonotoneLink(head.knots, np.array(array, dtype=float))


def flatten(arrays):
    return np.concatenate([np.ravel(a) for a in arrays])


def unflatten(vec, like):
    out, pos = [], 0
    for a in like:
        out.append(np.reshape(vec[pos : pos + a.size], a.shape))
        pos += a.size
    return out


# --------------------------------------------------------------------------
# constraint projections


@functools.lru_cache(maxsize=None)
def _sign_vertices(m):
    # x and -x give the same norm, so fix the first sign
    return np.array([(1.0,) + v for v in itertools.product((-1.0, 1.0), repeat=m - 1)])


def inf_to_two_norm(W, exact_limit=16):
    """max over x in [-1, 1]^m of ||W x||_2 for W of shape (k, m).

    Exact for k <= 2 (the maximizing vertex is sign(W^T u) for some unit u,
    and only O(m) such patterns exist in the plane) and for m <= ``exact_limit``
    by vertex enumeration; otherwise the smaller of two standard upper bounds.
    """
    W = np.asarray(W, dtype=float)
    k, m = W.shape
    if k == 1:
        return float(np.abs(W).sum())
    if k == 2:
        ang = np.arctan2(W[1], W[0])
        breaks = np.sort(np.mod(np.concatenate([ang + np.pi / 2, ang - np.pi / 2]), 2 * np.pi))
        nxt = np.concatenate([breaks[1:], breaks[:1] + 2 * np.pi])
        mids = 0.5 * (breaks + nxt)
        U = np.stack([np.cos(mids), np.sin(mids)], axis=1)
        P = np.sign(U @ W) @ W.T
        return float(np.sqrt(np.max(np.einsum("ij,ij->i", P, P))))
    if m <= exact_limit:
        P = _sign_vertices(m) @ W.T
        return float(np.sqrt(np.max(np.einsum("ij,ij->i", P, P))))
    col_sum = float(np.sum(np.linalg.norm(W, axis=0)))
    spectral = float(np.sqrt(m) * np.linalg.norm(W, 2))
    return min(col_sum, spectral)


def _cap_rows(W, cap):
    l1 = np.abs(W).sum(axis=1)
    scale = np.where(l1 > cap, cap / np.where(l1 > 0, l1, 1.0), 1.0)
    return W * scale[:, None]


def link_is_feasible(link, tol=0.0):
    v, z = link.values, link.knots
    if np.any(v < -tol) or np.any(v > 1 + tol):
        return False
    if v.shape[0] < 2:
        return True
    dv = np.diff(v)
    return bool(np.all(dv >= -tol) and np.all(dv <= np.diff(z) + tol))


def project_constraints(params):
    """Map parameters onto their class constraint set."""
    if isinstance(params, LinearSubspace):
        return LinearSubspace(qr_orthonormalize(params.B))
    if isinstance(params, LinearHead):
        nrm = np.linalg.norm(params.alpha)
        if nrm > params.cap:
            return LinearHead(params.alpha * (params.cap / nrm), params.cap)
        return params
    if isinstance(params, UnitDirection):
        nrm = np.linalg.norm(params.b)
        if nrm > params.cap:
            return UnitDirection(params.b * (params.cap / nrm), params.cap)
        return params
    if isinstance(params, TanhMlp):
        ws = [_cap_rows(W, c) for W, c in zip(params.weights, params.caps)]
        cap = params.caps[-1]
        # cheap sandwich first: max row l1 <= exact <= sum of column norms
        cheap_upper = float(np.sum(np.linalg.norm(ws[-1], axis=0)))
        top = cheap_upper if cheap_upper <= cap else inf_to_two_norm(ws[-1])
        if top > cap:
            log.info("last layer inf->2 norm %.4g exceeds cap %.4g; rescaling", top, cap)
            ws[-1] = ws[-1] * (cap / top)
        return TanhMlp(tuple(ws), params.caps)
    if isinstance(params, MonotoneLink):
        if link_is_feasible(params):
            return params
        return fit_link(params.knots, params.values, knots=params.knots)
    raise IncompatibleVariants(f"cannot project {type(params).__name__}")


# --------------------------------------------------------------------------
# link fitting


def _link_design_stats(z, y, knots):
    """Gram matrix and moment vector of the interpolation design."""
    K = knots.shape[0]
    idx, w = _interp_index(z, knots)
    a, b = 1.0 - w, w
    G = np.zeros((K, K))
    G[np.diag_indices(K)] = np.bincount(idx, a * a, minlength=K) + np.bincount(idx + 1, b * b, minlength=K)
    off = np.bincount(idx, a * b, minlength=K)[: K - 1]
    G[np.arange(K - 1), np.arange(1, K)] = off
    G[np.arange(1, K), np.arange(K - 1)] = off
    h = np.bincount(idx, a * y, minlength=K) + np.bincount(idx + 1, b * y, minlength=K)
    return G, h


def _finalize_values(v, knots):
    """Remove rounding-level violations left by the solver."""
    v = np.clip(v, 0.0, 1.0)
    dz = np.diff(knots)
    for k in range(1, v.shape[0]):
        v[k] = min(max(v[k], v[k - 1]), v[k - 1] + dz[k - 1], 1.0)
        # make the computed difference itself respect the slope cap
        while v[k] - v[k - 1] > knots[k] - knots[k - 1]:
            v[k] = np.nextafter(v[k], -np.inf)
    return v


def _solve_link_qp(G, h, knots):
    """min 1/2 v'Gv - h'v over monotone, 1-Lipschitz, [0, 1]-valued v.

    Works in increment coordinates v = L theta (theta_0 = v_0, theta_k =
    v_k - v_{k-1}) where every constraint is a box except sum(theta) <= 1,
    which is handled by bisection on its multiplier.
    """
    K = knots.shape[0]
    L = np.tril(np.ones((K, K)))
    Gt = L.T @ G @ L
    ht = L.T @ h
    ridge = 1e-14 * max(np.max(np.diag(Gt)), 1e-300)
    for _ in range(12):
        try:
            R = np.triu(cho_factor(Gt + ridge * np.eye(K), lower=False)[0])
            break
        except np.linalg.LinAlgError:
            ridge *= 100.0
    else:
        raise np.linalg.LinAlgError("link design is not positive definite")
    lo = np.zeros(K)
    hi = np.concatenate([[1.0], np.diff(knots)])

    def solve(lam):
        c = solve_triangular(R, ht - lam, trans="T", lower=False)
        res = lsq_linear(R, c, bounds=(lo, hi), method="bvls", tol=1e-14, max_iter=50 * K)
        return np.clip(res.x, lo, hi)

    theta = solve(0.0)
    if theta.sum() > 1.0:
        lam_lo, lam_hi = 0.0, 1.0
        while solve(lam_hi).sum() > 1.0:
            lam_hi *= 2.0
        for _ in range(100):
            mid = 0.5 * (lam_lo + lam_hi)
            if solve(mid).sum() > 1.0:
                lam_lo = mid
            else:
                lam_hi = mid
            if lam_hi - lam_lo <= 1e-15 * max(1.0, lam_hi):
                break
        theta = solve(lam_hi)
    return _finalize_values(np.cumsum(theta), knots)


def quantile_knots(z, n_knots=DEFAULT_KNOTS):
    z = np.asarray(z, dtype=float)
    uniq = np.unique(z)
    if uniq.shape[0] <= n_knots:
        return uniq
    knots = np.unique(np.quantile(z, np.linspace(0.0, 1.0, n_knots)))
    return knots


def fit_link(z, y, knots=None, n_knots=DEFAULT_KNOTS):
    """Least-squares fit of a monotone, 1-Lipschitz, [0, 1]-valued link.

    Parameters
    ----------
    z, y : array-like
        Index values and responses.
    knots : array-like, optional
        Knot grid. Defaults to empirical quantiles of ``z``.

    Returns
    -------
    MonotoneLink
        The exact squared-loss projection onto the class, restricted to
        piecewise-linear functions on the knot grid.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if z.shape[0] == 0:
        raise Empty("fit_link needs at least one pair")
    if z.shape != y.shape:
        raise DimMismatch("z and y lengths differ")
    if not np.all(np.isfinite(z)):
        raise ValueError("z values must be finite")
    knots = quantile_knots(z, n_knots) if knots is None else np.asarray(knots, dtype=float)
    if knots.shape[0] == 1:
        return MonotoneLink(knots.copy(), np.array([float(np.clip(y.mean(), 0.0, 1.0))]))
    G, h = _link_design_stats(z, y, knots)
    return MonotoneLink(knots.copy(), _solve_link_qp(G, h, knots))


def link_objective(link, z, y):
    return float(np.sum((link_eval(link, z) - y) ** 2))
