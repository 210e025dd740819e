"""Synthetic multitask environments and per-task data.

An environment fixes a ground-truth representation, t training heads plus a
test head (index 0), a Gaussian covariate law shared by all tasks and a
label law per family. Everything is a pure function of the seeds.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .errors import BadDims, BadOptions, BadTaskId, NotApplicable, ParseError
from .models import (
    Family,
    LinearHead,
    LinearSubspace,
    MonotoneLink,
    TanhMlp,
    UnitDirection,
    inf_to_two_norm,
    predict,
    project_constraints,
    rep_forward,
    sigmoid,
)
from .numlin import qr_orthonormalize, symmetric_eig

log = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class EnvOptions:
    """Construction knobs. Defaults are used throughout the package.

    Attributes
    ----------
    kappa : float
        Upper bound on the condition number of A^T A / t. ``inf`` disables
        conditioning.
    c1 : float
        Norm cap on heads searched by ERM.
    c2 : float
        Norm cap on true heads and on the new-task class F0.
    W : float
        Norm of the true index direction and cap on fitted directions.
    noise : float
        Standard deviation of the bounded uniform label noise.
    Sigma : array, optional
        Covariate covariance; identity when omitted.
    radius : float, optional
        Truncation radius D for covariates.
    hidden, layer_caps : tuple
        Hidden widths and per-layer row-l1 caps M(k) of the tanh network.
    gram_floor : float
        Minimum accepted sigma_r(E[h h^T]) for the network truth.
    n_link_knots : int
        Knots of the ground-truth links.
    """

    kappa: float = 4.0
    c1: float = 2.0
    c2: float = 1.0
    W: float = 1.0
    noise: float = 0.0
    Sigma: np.ndarray = field(default=None, compare=False)
    radius: float = None
    hidden: tuple = (16,)
    layer_caps: tuple = (2.0, 4.0)
    gram_floor: float = 0.05
    gram_draws: int = 4096
    max_attempts: int = 50
    n_link_knots: int = 33


@dataclass(frozen=True, eq=False)
class CovariateModel:
    d: int
    Sigma: np.ndarray
    radius: float = None

    def sample(self, gen, n):
        """Draw ``n`` rows; returns ``(X, acceptance_rate)``."""
        L = np.linalg.cholesky(self.Sigma)
        if self.radius is None:
            return gen.standard_normal((n, self.d)) @ L.T, 1.0
        kept, drawn, total = [], 0, 0
        block = max(64, n)
        while total < n:
            if drawn > 1000 * block:
                raise BadOptions("covariate truncation rejects nearly every draw")
            Z = gen.standard_normal((block, self.d)) @ L.T
            drawn += block
            Z = Z[np.linalg.norm(Z, axis=1) <= self.radius]
            kept.append(Z)
            total += Z.shape[0]
        rate = total / drawn
        log.debug("covariate truncation acceptance rate %.4f", rate)
        return np.concatenate(kept)[:n], rate


@dataclass(frozen=True, eq=False)
class TaskEnvironment:
    """Ground truth for one multitask problem.

    ``heads_truth[j]`` is the head of task ``j``; ``j = 0`` is the new task
    and ``1..t`` are the training tasks.
    """

    family: Family
    covariates: CovariateModel
    rep_truth: object
    heads_truth: tuple
    noise_scale: float
    c1: float
    c2: float
    W: float
    seed: int = 0
    kappa: float = np.inf
    meta: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.covariates.d

    @property
    def r(self):
        return self.rep_truth.r

    @property
    def t(self):
        return len(self.heads_truth) - 1

    @property
    def loss(self):
        from .models import FAMILY_LOSS

        return FAMILY_LOSS[self.family]

    @property
    def Sigma(self):
        return self.covariates.Sigma

    @property
    def linear_heads(self):
        return self.family is not Family.INDEX_MODEL

    def head_matrix(self):
        """A = (alpha_1 ... alpha_t)^T for linear-head families."""
        if not self.linear_heads:
            raise NotApplicable("index models have no head matrix")
        return np.stack([h.alpha for h in self.heads_truth[1:]])

    def signal(self, j, X):
        """Noise-free predictor f*_j(h*(x)) on rows of X."""
        return predict(self.rep_truth, self.heads_truth[j], X)


@dataclass(frozen=True, eq=False)
class TaskDataset:
    task_id: int
    X: np.ndarray
    y: np.ndarray
    acceptance_rate: float = 1.0

    @property
    def n(self):
        return self.X.shape[0]


# --------------------------------------------------------------------------
# construction


def _validate(family, d, r, t, opts):
    if d < 1 or r < 1 or t < 1 or r > d:
        raise BadDims(f"need d >= r >= 1 and t >= 1, got d={d}, r={r}, t={t}")
    if family is Family.INDEX_MODEL and r != 1:
        raise BadDims("index models have a scalar representation (r = 1)")
    if not opts.kappa >= 1.0:
        raise BadOptions("kappa must be >= 1")
    if np.isfinite(opts.kappa) and t < r and family is not Family.INDEX_MODEL:
        raise BadOptions("t < r leaves A^T A rank deficient; pass kappa=inf")
    for name in ("c1", "c2", "W"):
        if not getattr(opts, name) > 0:
            raise BadOptions(f"{name} must be positive")
    if opts.noise < 0:
        raise BadOptions("noise must be nonnegative")
    if opts.radius is not None and not opts.radius > 0:
        raise BadOptions("radius must be positive")
    if family is Family.NN_REGRESSION:
        if len(opts.layer_caps) != len(opts.hidden) + 1:
            raise BadOptions("layer_caps needs one entry per layer")
        if any(w < 1 for w in opts.hidden) or any(c <= 0 for c in opts.layer_caps):
            raise BadOptions("hidden widths and caps must be positive")
    if opts.n_link_knots < 2:
        raise BadOptions("links need at least two knots")


def _covariance(opts, d):
    if opts.Sigma is None:
        return np.eye(d)
    S = np.asarray(opts.Sigma, dtype=float)
    if S.shape != (d, d):
        raise BadOptions("Sigma has the wrong shape")
    w = symmetric_eig(S).eigenvalues
    if w[-1] <= 0:
        raise BadOptions("Sigma must be positive definite")
    return S


def _conditioned_heads(gen, t, r, kappa, c2):
    A = gen.normal(0.0, r**-0.25, size=(t, r))
    if np.isfinite(kappa) and t >= r:
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
        s = np.maximum(s, s[0] / np.sqrt(kappa))
        A = (U * s) @ Vt
    top = np.linalg.norm(A, axis=1).max()
    if top > c2:
        A = A * (c2 / top)
    return A


def _ball_head(gen, r, c2):
    a = gen.normal(0.0, r**-0.25, size=r)
    nrm = np.linalg.norm(a)
    return a * (c2 / nrm) if nrm > c2 else a


def _random_mlp(gen, d, r, hidden, caps):
    widths = (d,) + tuple(hidden) + (r,)
    ws = tuple(gen.standard_normal((widths[k + 1], widths[k])) for k in range(len(widths) - 1))
    # scale rows up to the cap so the truth uses its full budget
    ws = tuple(W * (c / np.abs(W).sum(axis=1))[:, None] for W, c in zip(ws, caps))
    return project_constraints(TanhMlp(ws, tuple(float(c) for c in caps)))


def _random_link(gen, knots):
    dz = np.diff(knots)
    mid = 0.5 * (knots[1:] + knots[:-1])
    span = knots[-1] - knots[0]
    center = knots[0] + span * gen.uniform(0.25, 0.75)
    width = span * gen.uniform(0.08, 0.25)
    slopes = gen.uniform(0.3, 1.0, size=dz.shape) * np.exp(-0.5 * ((mid - center) / width) ** 2)
    rise = float(slopes @ dz)
    if rise > 1.0:
        slopes = slopes / rise
        rise = 1.0
    v0 = gen.uniform(0.0, 1.0 - rise)
    values = np.concatenate([[v0], v0 + np.cumsum(slopes * dz)])
    return project_constraints(MonotoneLink(knots.copy(), values))


def make_environment(family, d, r, t, seed, options=None, **overrides):
    """Build a ground-truth environment.

    Parameters
    ----------
    family : Family or str
    d, r, t : int
        Ambient dimension, representation width, number of training tasks.
    seed : int
        Base seed; every random choice is keyed from it.
    options : EnvOptions, optional
        Construction knobs; keyword ``overrides`` replace individual fields.

    Returns
    -------
    TaskEnvironment
    """
    family = Family(family)
    opts = options or EnvOptions()
    if overrides:
        unknown = set(overrides) - set(EnvOptions.__dataclass_fields__)
        if unknown:
            raise BadOptions(f"unknown options: {sorted(unknown)}")
        opts = EnvOptions(**{**opts.__dict__, **overrides})
    d, r, t = int(d), int(r), int(t)
    _validate(family, d, r, t, opts)
    Sigma = _covariance(opts, d)
    cov = CovariateModel(d, Sigma, opts.radius)
    meta = {}

    if family is Family.INDEX_MODEL:
        gen = rng_mod.stream(seed, "env", "rep")
        b = gen.standard_normal(d)
        b *= opts.W / np.linalg.norm(b)
        rep = UnitDirection(b, opts.W)
        lam_max = symmetric_eig(Sigma).eigenvalues[0]
        half = 3.0 * opts.W * np.sqrt(lam_max)
        knots = np.linspace(-half, half, opts.n_link_knots)
        gen = rng_mod.stream(seed, "env", "heads")
        links = [_random_link(gen, knots) for _ in range(t)]
        lam = gen.dirichlet(np.ones(t))
        v0 = np.clip(lam @ np.stack([l.values for l in links]), 0.0, 1.0)
        heads = (MonotoneLink(knots.copy(), v0),) + tuple(links)
        meta["hull_weights"] = lam
        return TaskEnvironment(family, cov, rep, heads, opts.noise, opts.c1, opts.c2, opts.W, int(seed), np.inf, meta)

    if family is Family.NN_REGRESSION:
        for attempt in range(1, opts.max_attempts + 1):
            gen = rng_mod.stream(seed, "env", "rep", attempt)
            rep = _random_mlp(gen, d, r, opts.hidden, opts.layer_caps)
            Xg, _ = cov.sample(rng_mod.stream(seed, "env", "gram", attempt), opts.gram_draws)
            H = rep_forward(rep, Xg)
            floor = symmetric_eig(H.T @ H / Xg.shape[0]).eigenvalues[-1]
            if floor >= opts.gram_floor:
                break
        else:
            raise BadOptions(f"no network met the Gram floor in {opts.max_attempts} attempts")
        meta["gram_attempts"] = attempt
        meta["gram_floor_estimate"] = float(floor)
    else:
        gen = rng_mod.stream(seed, "env", "rep")
        rep = LinearSubspace(qr_orthonormalize(gen.standard_normal((d, r))))

    gen = rng_mod.stream(seed, "env", "heads")
    A = _conditioned_heads(gen, t, r, opts.kappa, opts.c2)
    a0 = _ball_head(gen, r, opts.c2)
    heads = (LinearHead(a0, opts.c2),) + tuple(LinearHead(a.copy(), opts.c2) for a in A)
    return TaskEnvironment(family, cov, rep, heads, opts.noise, opts.c1, opts.c2, opts.W, int(seed), opts.kappa, meta)


def with_test_head(env, head):
    """Copy of ``env`` with the new-task head replaced."""
    return TaskEnvironment(
        env.family, env.covariates, env.rep_truth, (head,) + tuple(env.heads_truth[1:]),
        env.noise_scale, env.c1, env.c2, env.W, env.seed, env.kappa, dict(env.meta),
    )


# --------------------------------------------------------------------------
# sampling


def draw_labels(env, j, signal, gen):
    """Labels for task ``j`` given the noise-free signal."""
    if env.family is Family.LINEAR_LOGISTIC:
        return (gen.random(signal.shape[0]) < sigmoid(signal)).astype(float)
    if env.noise_scale == 0.0:
        return signal.copy()
    a = env.noise_scale * np.sqrt(3.0)
    return signal + gen.uniform(-a, a, size=signal.shape[0])


def sample_task_dataset(env, j, n, seed):
    """Draw ``n`` labelled rows for task ``j`` (0 is the new task)."""
    if not 0 <= int(j) <= env.t:
        raise BadTaskId(f"task id {j} outside [0, {env.t}]")
    if n < 0:
        raise BadDims("n must be nonnegative")
    j, n = int(j), int(n)
    X, rate = env.covariates.sample(rng_mod.stream(seed, "x", env.seed, j), n)
    y = draw_labels(env, j, env.signal(j, X), rng_mod.stream(seed, "y", env.seed, j))
    return TaskDataset(j, X, y, rate)


def sample_training_sets(env, n, seed):
    return [sample_task_dataset(env, j, n, seed) for j in range(1, env.t + 1)]


# --------------------------------------------------------------------------
# diversity parameter


def diversity_parameter(env, allow_bound=False):
    """nu_tilde = sigma_r(A^T A / t).

    For index models the parameter is not a singular value; the known lower
    bound 1/t is carried on the raised :class:`NotApplicable` (or returned
    when ``allow_bound`` is set).
    """
    if not env.linear_heads:
        if allow_bound:
            return 1.0 / env.t
        raise NotApplicable("index models have no head matrix; nu >= 1/t", bound=1.0 / env.t)
    A = env.head_matrix()
    return float(symmetric_eig(A.T @ A / env.t).eigenvalues[-1])


def head_condition_number(env):
    A = env.head_matrix()
    w = symmetric_eig(A.T @ A / env.t).eigenvalues
    return float(w[0] / w[-1]) if w[-1] > 0 else np.inf


# --------------------------------------------------------------------------
# snapshots


def _write_matrix(lines, name, M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    lines.append(f"begin matrix {name} {M.shape[0]} {M.shape[1]}")
    for row in M:
        lines.append(" ".join(repr(float(v)) for v in row))
    lines.append("end matrix")


def to_snapshot(env):
    """Serialize an environment to the versioned plain-text format."""
    lines = [
        "format = divlearn-env",
        f"version = {SNAPSHOT_VERSION}",
        f"family = {env.family.value}",
        f"d = {env.d}",
        f"t = {env.t}",
        f"seed = {env.seed}",
        f"noise_scale = {env.noise_scale!r}",
        f"c1 = {env.c1!r}",
        f"c2 = {env.c2!r}",
        f"W = {env.W!r}",
        f"kappa = {float(env.kappa)!r}",
        f"radius = {'none' if env.covariates.radius is None else repr(float(env.covariates.radius))}",
    ]
    _write_matrix(lines, "Sigma", env.Sigma)
    rep = env.rep_truth
    if isinstance(rep, LinearSubspace):
        lines.append("rep = linear_subspace")
        _write_matrix(lines, "B", rep.B)
    elif isinstance(rep, TanhMlp):
        lines.append("rep = tanh_mlp")
        lines.append("layer_caps = " + ", ".join(repr(float(c)) for c in rep.caps))
        for k, W in enumerate(rep.weights):
            _write_matrix(lines, f"W{k + 1}", W)
    else:
        lines.append("rep = unit_direction")
        _write_matrix(lines, "b", rep.b[None, :])
    if env.linear_heads:
        _write_matrix(lines, "heads", np.stack([h.alpha for h in env.heads_truth]))
    else:
        _write_matrix(lines, "knots", env.heads_truth[0].knots[None, :])
        _write_matrix(lines, "links", np.stack([h.values for h in env.heads_truth]))
    return "\n".join(lines) + "\n"


def from_snapshot(text):
    """Inverse of :func:`to_snapshot`."""
    keys, mats = {}, {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        raw = lines[i].strip()
        i += 1
        if not raw or raw.startswith("#"):
            continue
        if raw.startswith("begin matrix"):
            parts = raw.split()
            if len(parts) != 5:
                raise ParseError("malformed matrix header", i)
            name, rows, cols = parts[2], int(parts[3]), int(parts[4])
            data = []
            for _ in range(rows):
                if i >= len(lines):
                    raise ParseError("truncated matrix", i)
                data.append([float(v) for v in lines[i].split()])
                i += 1
            if i >= len(lines) or lines[i].strip() != "end matrix":
                raise ParseError("missing end matrix", i + 1)
            i += 1
            M = np.array(data, dtype=float).reshape(rows, cols)
            mats[name] = M
            continue
        if "=" not in raw:
            raise ParseError("expected key = value", i)
        k, v = (s.strip() for s in raw.split("=", 1))
        keys[k] = v
    if keys.get("format") != "divlearn-env" or int(keys.get("version", -1)) != SNAPSHOT_VERSION:
        raise ParseError("not a divlearn environment snapshot")
    family = Family(keys["family"])
    radius = None if keys["radius"] == "none" else float(keys["radius"])
    cov = CovariateModel(int(keys["d"]), mats["Sigma"], radius)
    c2, W = float(keys["c2"]), float(keys["W"])
    rep_kind = keys["rep"]
    if rep_kind == "linear_subspace":
        rep = LinearSubspace(mats["B"])
    elif rep_kind == "tanh_mlp":
        caps = tuple(float(c) for c in keys["layer_caps"].split(","))
        rep = TanhMlp(tuple(mats[f"W{k + 1}"] for k in range(len(caps))), caps)
    else:
        rep = UnitDirection(mats["b"][0], W)
    if "heads" in mats:
        heads = tuple(LinearHead(a.copy(), c2) for a in mats["heads"])
    else:
        knots = mats["knots"][0]
        heads = tuple(MonotoneLink(knots.copy(), v.copy()) for v in mats["links"])
    return TaskEnvironment(
        family, cov, rep, heads, float(keys["noise_scale"]), float(keys["c1"]), c2, W,
        int(keys["seed"]), float(keys["kappa"]), {},
    )
