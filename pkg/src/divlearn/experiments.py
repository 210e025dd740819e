"""Experiment runners: one CSV row per grid point and trial.

Every runner builds a list of independent work units, evaluates them
(optionally on a thread pool) and writes rows in a fixed order, so the output
depends only on the configuration. A failing stage is recorded in the row's
``error`` column instead of aborting the run.
"""

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import rng as rng_mod
from .complexity import LinearBall, OrthonormalFrames, linear_closed_forms, mc_gaussian_complexity
from .csvio import format_value, write_csv
from .diversity import Method, diversity_certificate, task_avg_difference, worst_case_difference
from .envs import (
    EnvOptions,
    diversity_parameter,
    make_environment,
    sample_task_dataset,
    sample_training_sets,
)
from .erm import (
    OptConfig,
    isolation_baseline,
    model_class_for,
    population_excess_risk,
    test_phase_erm,
    train_phase_erm,
    write_trace,
)
from .errors import BadOptions
from .landscape import bm_fit, extract_features, incoherence_report, low_rank_truth, sample_task_samples
from .models import Family, LinearSubspace, TanhMlp, UnitDirection, project_constraints
from .numlin import qr_orthonormalize, subspace_sine, symmetric_eig

#: Constant C0 of the incoherent region reported by the landscape runner.
INCOHERENCE_C0 = 10.0

SWEEP_COLUMNS = (
    "experiment_id", "family", "d", "r", "t", "n", "m", "trial", "seed", "nu_tilde",
    "transfer_excess_risk", "transfer_stderr", "isolation_excess_risk", "isolation_stderr",
    "sin_theta", "train_risk_final", "wall_ms", "error",
)
DIVERSITY_COLUMNS = (
    "experiment_id", "family", "d", "r", "t", "trial", "seed", "sample_id", "method", "nu_tilde",
    "d_avg", "d_worst", "stderr_avg", "stderr_worst", "nu_implied", "epsilon", "worst_is_lower_bound",
    "d_avg_closed", "d_worst_closed", "nu_theory", "consistent", "wall_ms", "error",
)
COMPLEXITY_COLUMNS = (
    "experiment_id", "family", "d", "r", "t", "n", "trial", "seed", "class", "dataset_id",
    "mean", "stderr", "draws", "is_lower_bound", "bound", "dominated", "wall_ms", "error",
)
LANDSCAPE_COLUMNS = (
    "experiment_id", "family", "d", "r", "t", "n", "trial", "seed", "sin_theta", "rel_error",
    "imbalance", "imbalance_rel", "sigma1_star", "objective", "iterations", "incoherent",
    "wall_ms", "error",
)


@dataclass(frozen=True)
class RunResult:
    path: str
    rows: tuple
    n_errors: int


# --------------------------------------------------------------------------
# shared plumbing


def env_options(cfg):
    return EnvOptions(
        kappa=cfg.kappa, c1=cfg.c1, c2=cfg.c2, W=cfg.W, noise=cfg.noise, radius=cfg.radius,
        hidden=tuple(cfg.hidden), layer_caps=tuple(cfg.layer_caps),
    )


def opt_config(cfg, seed, trace=False):
    return OptConfig(
        max_iters=cfg.max_iters, step_size=cfg.step_size, step_decay=cfg.step_decay,
        tol_grad=cfg.tol_grad, restarts=cfg.restarts, seed=seed,
        head_solve_every=cfg.head_solve_every, trace=trace,
    )


def trial_seed(cfg, *labels):
    """Seed for one trial; independent of sample sizes so designs are nested."""
    return int(rng_mod.stream(cfg.seed, "trial", *labels).integers(0, 2**62))


def _error_text(exc):
    return f"{type(exc).__name__}: {exc}"


def _ms(start):
    # floor at one microsecond so the column stays strictly positive
    return max((time.perf_counter() - start) * 1e3, 1e-3)


def _evaluate(units, worker, threads):
    if threads > 1 and len(units) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(worker, units))
    else:
        chunks = [worker(u) for u in units]
    return [row for chunk in chunks for row in chunk]


def _finish(cfg, rows, header, out):
    path = os.fspath(out or cfg.output_path)
    write_csv(path, header, rows)
    return RunResult(path, tuple(rows), sum(1 for r in rows if r.get("error")))


def representation_sine(rep_hat, rep_true):
    """sin of the largest principal angle; nan for network representations."""
    if isinstance(rep_hat, LinearSubspace):
        return subspace_sine(qr_orthonormalize(rep_hat.B), qr_orthonormalize(rep_true.B))
    if isinstance(rep_hat, UnitDirection):
        a = rep_hat.b / np.linalg.norm(rep_hat.b)
        b = rep_true.b / np.linalg.norm(rep_true.b)
        return float(np.sqrt(max(0.0, 1.0 - float(a @ b) ** 2)))
    return float("nan")


# --------------------------------------------------------------------------
# sweep


def _trace_path(out, name):
    stem = os.path.splitext(os.fspath(out))[0]
    return os.path.join(stem + "_traces", name)


def run_sweep(cfg, out=None, threads=1, trace=False):
    """Transfer versus isolation excess risk over the (t, n, m) grid.

    The representation is trained once per (t, n, trial) and reused for every
    ``m``; ``wall_ms`` counts that training time plus the row's own work.
    """
    out = out or cfg.output_path
    units = [(t, n, k) for t in cfg.t_values for n in cfg.n_grid for k in range(cfg.trials)]

    def work(unit):
        t, n, k = unit
        seed = trial_seed(cfg, t, k)
        base = {"experiment_id": cfg.label, "family": cfg.family, "d": cfg.d, "r": cfg.r, "t": t, "n": n, "trial": k, "seed": seed}
        rows = [dict(base, m=m) for m in cfg.m_grid]
        start = time.perf_counter()
        try:
            env = make_environment(cfg.family, cfg.d, cfg.r, t, seed, env_options(cfg))
            nu = diversity_parameter(env, allow_bound=True)
            mc = model_class_for(env)
            opt = opt_config(cfg, seed, trace)
            fit = train_phase_erm(sample_training_sets(env, n, seed), mc, opt)
            if trace:
                path = _trace_path(out, f"t{t}_n{n}_trial{k}.csv")
                os.makedirs(os.path.dirname(path), exist_ok=True)
                write_trace(fit, path)
            sine = representation_sine(fit.rep, env.rep_truth)
        except Exception as exc:
            ms = _ms(start)
            for row in rows:
                row.update(wall_ms=ms, error=_error_text(exc))
            return rows
        train_ms = _ms(start)
        iso_opt = replace(opt, trace=False)
        for row in rows:
            row.update(nu_tilde=nu, sin_theta=sine, train_risk_final=fit.final_empirical_risk)
            t0 = time.perf_counter()
            try:
                ds0 = sample_task_dataset(env, 0, row["m"], seed)
                head = test_phase_erm(ds0, fit.rep, mc, opt, head_cap=env.c1)
                tr = population_excess_risk(env, fit.rep, head, cfg.n_eval, seed)
                iso_head, iso_rep = isolation_baseline(ds0, mc, iso_opt)
                iso = population_excess_risk(env, iso_rep, iso_head, cfg.n_eval, seed)
                row.update(
                    transfer_excess_risk=tr.value, transfer_stderr=tr.stderr,
                    isolation_excess_risk=iso.value, isolation_stderr=iso.stderr,
                )
            except Exception as exc:
                row["error"] = _error_text(exc)
            row["wall_ms"] = train_ms + _ms(t0)
        return rows

    return _finish(cfg, _evaluate(units, work, threads), SWEEP_COLUMNS, out)


# --------------------------------------------------------------------------
# diversity audit


def candidate_representation(env, gen):
    """A random representation near the truth; the perturbation scale is log-uniform."""
    scale = 10.0 ** gen.uniform(-2.0, 1.0)
    rep = env.rep_truth
    if isinstance(rep, LinearSubspace):
        return LinearSubspace(qr_orthonormalize(rep.B + scale * gen.standard_normal(rep.B.shape)))
    if isinstance(rep, UnitDirection):
        b = rep.b + scale * np.linalg.norm(rep.b) * gen.standard_normal(rep.b.shape)
        return UnitDirection(rep.cap * b / np.linalg.norm(b), rep.cap)
    if isinstance(rep, TanhMlp):
        ws = tuple(W + scale * gen.standard_normal(W.shape) for W in rep.weights)
        return project_constraints(TanhMlp(ws, rep.caps))
    raise BadOptions(f"unsupported representation {type(rep).__name__}")


def run_diversity_audit(cfg, out=None, threads=1, trace=False):
    """Per-candidate diversity reports; closed-form columns for linear-Gaussian regression."""
    out = out or cfg.output_path
    units = list(range(cfg.trials))

    def work(k):
        seed = trial_seed(cfg, cfg.t, k)
        base = {"experiment_id": cfg.label, "family": cfg.family, "d": cfg.d, "r": cfg.r, "t": cfg.t, "trial": k, "seed": seed}
        rows = [dict(base, sample_id=s) for s in range(cfg.samples)]
        start = time.perf_counter()
        try:
            env = make_environment(cfg.family, cfg.d, cfg.r, cfg.t, seed, env_options(cfg))
            gen = rng_mod.stream(seed, "audit-candidates")
            reps = [candidate_representation(env, gen) for _ in rows]
        except Exception as exc:
            ms = _ms(start)
            for row in rows:
                row.update(wall_ms=ms, error=_error_text(exc))
            return rows
        closed = env.family is Family.LINEAR_REGRESSION and env.covariates.radius is None
        for row, rep in zip(rows, reps):
            t0 = time.perf_counter()
            try:
                s = int(rng_mod.stream(seed, "audit-sample", row["sample_id"]).integers(0, 2**62))
                cert = diversity_certificate(
                    env, [rep], cfg.epsilon, cfg.n_eval, s, Method.MONTE_CARLO, cfg.starts,
                )
                rep_row = cert.reports[0]
                row.update(
                    method=rep_row.method.value, nu_tilde=rep_row.nu_tilde, d_avg=rep_row.d_avg,
                    d_worst=rep_row.d_worst, stderr_avg=rep_row.stderr_avg, stderr_worst=rep_row.stderr_worst,
                    nu_implied=rep_row.nu_implied, epsilon=rep_row.epsilon_used,
                    worst_is_lower_bound=rep_row.worst_is_lower_bound, nu_theory=cert.nu_theory,
                    consistent=cert.consistent,
                )
                if closed:
                    row["d_avg_closed"] = task_avg_difference(env, rep, method=Method.CLOSED_FORM).value
                    row["d_worst_closed"] = worst_case_difference(env, rep, env.c2, method=Method.CLOSED_FORM).value
            except Exception as exc:
                row["error"] = _error_text(exc)
            row["wall_ms"] = _ms(t0)
        return rows

    return _finish(cfg, _evaluate(units, work, threads), DIVERSITY_COLUMNS, out)


# --------------------------------------------------------------------------
# complexity audit


def _principal_frame(X, r):
    """Top-r eigenvectors of X'X: the representation maximizing the per-task bound."""
    spec = symmetric_eig(X.T @ X / X.shape[0])
    return spec.eigenvectors[:, :r]


def run_complexity_audit(cfg, out=None, threads=1, trace=False):
    """Monte Carlo Gaussian complexities against the linear closed forms.

    Each (n, trial) yields one ``H`` row on the pooled inputs and one ``F``
    row per training task, evaluated at the representation that maximizes
    that task's closed form.
    """
    out = out or cfg.output_path
    units = [(n, k) for n in cfg.n_grid for k in range(cfg.trials)]

    def work(unit):
        n, k = unit
        seed = trial_seed(cfg, cfg.t, k)
        base = {"experiment_id": cfg.label, "family": cfg.family, "d": cfg.d, "r": cfg.r, "t": cfg.t, "n": n, "trial": k, "seed": seed}
        rows = [dict(base, **{"class": "H", "dataset_id": "pooled"})]
        rows += [dict(base, **{"class": "F", "dataset_id": f"task{j}"}) for j in range(1, cfg.t + 1)]
        start = time.perf_counter()
        try:
            env = make_environment(cfg.family, cfg.d, cfg.r, cfg.t, seed, env_options(cfg))
            datasets = sample_training_sets(env, n, seed)
            bounds = linear_closed_forms(env, datasets)
        except Exception as exc:
            ms = _ms(start)
            for row in rows:
                row.update(wall_ms=ms, error=_error_text(exc))
            return rows
        jobs = [(OrthonormalFrames(env.r), np.concatenate([ds.X for ds in datasets]), bounds.gauss_H)]
        for ds, b in zip(datasets, bounds.gauss_F_tasks):
            jobs.append((LinearBall(env.c1), ds.X @ _principal_frame(ds.X, env.r), b))
        for idx, (row, (spec, Z, bound)) in enumerate(zip(rows, jobs)):
            t0 = time.perf_counter()
            try:
                est = mc_gaussian_complexity(spec, Z, cfg.draws, int(rng_mod.stream(seed, "cx", idx).integers(0, 2**62)))
                row.update(
                    mean=est.mean, stderr=est.stderr, draws=est.draws, is_lower_bound=est.is_lower_bound,
                    bound=bound, dominated=bool(est.mean <= bound),
                )
            except Exception as exc:
                row["error"] = _error_text(exc)
            row["wall_ms"] = _ms(t0)
        return rows

    return _finish(cfg, _evaluate(units, work, threads), COMPLEXITY_COLUMNS, out)


# --------------------------------------------------------------------------
# landscape


def run_landscape(cfg, out=None, threads=1, trace=False):
    """Factored recovery of A B*^T; ``n`` counts samples pooled over tasks."""
    out = out or cfg.output_path
    units = [(n, k) for n in cfg.n_grid for k in range(cfg.trials)]

    def work(unit):
        n, k = unit
        seed = trial_seed(cfg, cfg.t, k)
        row = {"experiment_id": cfg.label, "family": cfg.family, "d": cfg.d, "r": cfg.r, "t": cfg.t, "n": n, "trial": k, "seed": seed}
        start = time.perf_counter()
        try:
            env = make_environment(cfg.family, cfg.d, cfg.r, cfg.t, seed, env_options(cfg))
            truth = low_rank_truth(env)
            data = sample_task_samples(env, n, seed)
            params, fit_trace = bm_fit(data, cfg.t, cfg.d, cfg.r, opt_config(cfg, seed), return_trace=True)
            if trace:
                path = _trace_path(out, f"n{n}_trial{k}.csv")
                os.makedirs(os.path.dirname(path), exist_ok=True)
                _write_bm_trace(fit_trace, path)
            D = params.U.T @ params.U - params.V.T @ params.V
            imbalance = float(np.linalg.norm(D))
            M_hat = params.U @ params.V.T
            inc = incoherence_report(params, INCOHERENCE_C0, truth.kappa_bar, truth.sigma1, cfg.t, cfg.r)
            row.update(
                sin_theta=subspace_sine(extract_features(params), env.rep_truth.B),
                rel_error=float(np.linalg.norm(M_hat - truth.M) / np.linalg.norm(truth.M)),
                imbalance=imbalance, imbalance_rel=imbalance / truth.sigma1, sigma1_star=truth.sigma1,
                objective=fit_trace[-1][1], iterations=fit_trace[-1][0], incoherent=inc.in_set,
            )
        except Exception as exc:
            row["error"] = _error_text(exc)
        row["wall_ms"] = _ms(start)
        return [row]

    return _finish(cfg, _evaluate(units, work, threads), LANDSCAPE_COLUMNS, out)


def _write_bm_trace(fit_trace, path):
    with open(path, "w") as fh:
        fh.write("iter,risk,step,grad_norm\n")
        for it, val, step, g in fit_trace:
            fh.write(",".join(format_value(v) for v in (it, val, step, g)) + "\n")


RUNNERS = {
    "sweep": run_sweep,
    "diversity": run_diversity_audit,
    "complexity": run_complexity_audit,
    "landscape": run_landscape,
}


def run_experiment(cfg, out=None, threads=1, trace=False):
    """Dispatch on ``cfg.kind``."""
    return RUNNERS[cfg.kind](cfg, out=out, threads=threads, trace=trace)
