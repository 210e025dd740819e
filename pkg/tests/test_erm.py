import csv
import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from divlearn.envs import (
    TaskDataset,
    make_environment,
    sample_task_dataset,
    sample_training_sets,
    with_test_head,
)
from divlearn.erm import (
    OptConfig,
    finite_difference_audit,
    isolation_baseline,
    model_class_for,
    pointwise_excess,
    population_excess_risk,
    train_phase_erm,
    write_trace,
)
from divlearn import erm
from divlearn.errors import BadOptions, EmptyData
from divlearn.models import (
    Family,
    LinearHead,
    LinearSubspace,
    Loss,
    MonotoneLink,
    UnitDirection,
    empirical_risk,
    predict,
    project_constraints,
    rep_arrays,
)
from divlearn.numlin import least_squares, subspace_sine

from conftest import linear_env


def recomputed_risk(fit, datasets, loss):
    total = sum(np.sum(np.atleast_1d(np.asarray(
        [empirical_risk(loss, predict(fit.rep, h, ds.X), ds.y) * ds.n]))) for h, ds in zip(fit.heads, datasets))
    return total / sum(ds.n for ds in datasets)


class TestOptConfig:
    @pytest.mark.parametrize("kw", [{"max_iters": 0}, {"step_size": 0.0}, {"tol_grad": 0.0}, {"step_decay": 1.0}, {"restarts": 0}])
    def test_invalid(self, kw):
        with pytest.raises(BadOptions):
            OptConfig(**kw)


class TestTrainPhase:
    def test_noiseless_single_task_recovery(self):
        env = make_environment(Family.LINEAR_REGRESSION, 5, 1, 1, seed=3, kappa=np.inf)
        fit = train_phase_erm(sample_training_sets(env, 200, 1), model_class_for(env), OptConfig(restarts=3))
        assert fit.final_empirical_risk <= 1e-6
        assert subspace_sine(fit.rep.B, env.rep_truth.B) <= 1e-3

    def test_single_point_interpolated(self):
        ds = TaskDataset(1, np.array([[0.3, -1.2, 0.5]]), np.array([0.7]))
        fit = train_phase_erm([ds], Family.LINEAR_REGRESSION, OptConfig(restarts=2), r=1)
        assert fit.final_empirical_risk < 1e-10

    def test_more_tasks_recover_better_at_equal_budget(self):
        # raw Gaussian heads (no conditioning, caps not binding): two heads in
        # r = 2 are often nearly collinear, eight rarely are
        wins = []
        for k in range(20):
            out = []
            for t, n in ((8, 100), (2, 400)):
                env = make_environment(Family.LINEAR_REGRESSION, 6, 2, t, seed=100 + k, noise=0.1, kappa=np.inf, c2=10.0, c1=20.0)
                fit = train_phase_erm(sample_training_sets(env, n, k), model_class_for(env), OptConfig(restarts=2, seed=k))
                out.append(subspace_sine(fit.rep.B, env.rep_truth.B))
            wins.append(out)
        wins = np.array(wins)
        assert np.median(wins[:, 0]) < np.median(wins[:, 1])

    @pytest.mark.parametrize("family", [Family.LINEAR_REGRESSION, Family.LINEAR_LOGISTIC, Family.NN_REGRESSION, Family.INDEX_MODEL])
    def test_trace_monotone_and_risk_consistent(self, family):
        r = 1 if family is Family.INDEX_MODEL else 2
        env = make_environment(family, 4, r, 3, seed=2, noise=0.1, hidden=(4,))
        ds = sample_training_sets(env, 60, 0)
        fit = train_phase_erm(ds, model_class_for(env), OptConfig(restarts=2, max_iters=300, trace=True))
        risks = [row[1] for row in fit.trace]
        assert all(b <= a for a, b in zip(risks, risks[1:]))
        assert abs(fit.final_empirical_risk - recomputed_risk(fit, ds, env.loss)) <= 1e-10
        # returned parameters are feasible: projection leaves them unchanged
        for a, b in zip(rep_arrays(fit.rep), rep_arrays(project_constraints(fit.rep))):
            assert np.max(np.abs(a - b)) <= 1e-10
        for h in fit.heads:
            p = project_constraints(h)
            if isinstance(h, LinearHead):
                assert np.array_equal(p.alpha, h.alpha)
            else:
                assert np.array_equal(p.values, h.values)

    def test_deterministic(self):
        env = make_environment(Family.NN_REGRESSION, 3, 2, 2, seed=0, noise=0.1, hidden=(4,))
        ds = sample_training_sets(env, 40, 0)
        opt = OptConfig(restarts=2, max_iters=200, seed=5)
        a, b = train_phase_erm(ds, model_class_for(env), opt), train_phase_erm(ds, model_class_for(env), opt)
        assert a.final_empirical_risk == b.final_empirical_risk
        for x, y in zip(rep_arrays(a.rep), rep_arrays(b.rep)):
            assert x.tobytes() == y.tobytes()

    def test_realizable_network(self):
        env = make_environment(Family.NN_REGRESSION, 3, 1, 2, seed=1, hidden=(4,))
        fit = train_phase_erm(sample_training_sets(env, 300, 2), model_class_for(env), OptConfig(restarts=2, max_iters=20000))
        assert min(fit.restart_risks) <= 1e-5

    def test_realizable_index_on_truth_knot_grid(self):
        env = make_environment(Family.INDEX_MODEL, 4, 1, 3, seed=1)
        mc = dataclasses.replace(model_class_for(env), link_knots=env.heads_truth[1].knots)
        fit = train_phase_erm(sample_training_sets(env, 400, 2), mc, OptConfig(restarts=2))
        assert min(fit.restart_risks) <= 1e-5

    def test_logistic_beats_truth_on_sample(self):
        env = make_environment(Family.LINEAR_LOGISTIC, 4, 2, 3, seed=1)
        ds = sample_training_sets(env, 200, 0)
        fit = train_phase_erm(ds, model_class_for(env), OptConfig(restarts=2))
        truth = sum(empirical_risk(Loss.LOGISTIC, env.signal(j + 1, d.X), d.y) * d.n for j, d in enumerate(ds)) / 600
        assert fit.final_empirical_risk <= truth

    def test_write_trace(self, tmp_path):
        env = make_environment(Family.LINEAR_REGRESSION, 3, 1, 2, seed=0, noise=0.1)
        fit = train_phase_erm(sample_training_sets(env, 20, 0), model_class_for(env), OptConfig(restarts=1, trace=True))
        path = tmp_path / "trace.csv"
        write_trace(fit, path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iter", "risk", "step", "grad_norm"]
        assert len(rows) == len(fit.trace) + 1


class TestTestPhase:
    def test_squared_truth_recovers_head(self):
        env = make_environment(Family.LINEAR_REGRESSION, 6, 2, 3, seed=4)
        ds0 = sample_task_dataset(env, 0, 10, seed=0)
        head = erm.test_phase_erm(ds0, env.rep_truth, Family.LINEAR_REGRESSION)
        np.testing.assert_allclose(head.alpha, env.heads_truth[0].alpha, atol=1e-8)

    def test_matches_least_squares(self):
        env = make_environment(Family.LINEAR_REGRESSION, 6, 2, 3, seed=4, noise=0.3)
        ds0 = sample_task_dataset(env, 0, 30, seed=0)
        head = erm.test_phase_erm(ds0, env.rep_truth, Family.LINEAR_REGRESSION, head_cap=100.0)
        np.testing.assert_allclose(head.alpha, least_squares(ds0.X @ env.rep_truth.B, ds0.y), atol=1e-10)

    def test_logistic_zero_head(self):
        env = linear_env(np.eye(3)[:, :2], [[0.5, 0.5]], [0.0, 0.0], family=Family.LINEAR_LOGISTIC)
        ds0 = sample_task_dataset(env, 0, 50, seed=1)
        head = erm.test_phase_erm(ds0, env.rep_truth, Family.LINEAR_LOGISTIC)
        assert population_excess_risk(env, env.rep_truth, head, 100_000, 0).value < 0.05

    def test_index_hull_link(self):
        env = make_environment(Family.INDEX_MODEL, 20, 1, 5, seed=1)
        ds0 = sample_task_dataset(env, 0, 200, seed=3)
        link = erm.test_phase_erm(ds0, env.rep_truth, Family.INDEX_MODEL)
        assert empirical_risk(Loss.ABSOLUTE, predict(env.rep_truth, link, ds0.X), ds0.y) <= 0.01

    def test_empty(self):
        env = make_environment(Family.LINEAR_REGRESSION, 3, 1, 2, seed=0)
        with pytest.raises(EmptyData):
            erm.test_phase_erm(sample_task_dataset(env, 0, 0, 0), env.rep_truth, Family.LINEAR_REGRESSION)


class TestPopulationRisk:
    @pytest.mark.parametrize("family", list(Family))
    def test_truth_scores_zero(self, family):
        r = 1 if family is Family.INDEX_MODEL else 2
        env = make_environment(family, 4, r, 2, seed=0, hidden=(4,))
        assert population_excess_risk(env, env.rep_truth, env.heads_truth[0], 10_000, 0).value == 0.0

    def test_shifted_head_quadratic(self):
        env = make_environment(Family.LINEAR_REGRESSION, 5, 2, 3, seed=0, noise=0.2)
        delta = 0.1
        head = LinearHead(env.heads_truth[0].alpha + delta * np.array([1.0, 0.0]))
        est = population_excess_risk(env, env.rep_truth, head, 100_000, 1)
        # B has orthonormal columns and Sigma = I, so the excess is delta^2
        assert abs(est.value - delta**2) <= 3 * est.stderr

    def test_logistic_nonnegative(self, rng):
        env = make_environment(Family.LINEAR_LOGISTIC, 4, 2, 3, seed=0)
        for _ in range(5):
            head = LinearHead(rng.standard_normal(2))
            rep = project_constraints(LinearSubspace(rng.standard_normal((4, 2))))
            est = population_excess_risk(env, rep, head, 20_000, 0)
            assert est.value >= -3 * est.stderr

    @given(st.just(0.0) | st.floats(1e-6, 2.0), st.floats(-3.0, 3.0))
    def test_absolute_excess_matches_quadrature(self, sigma, u):
        a = sigma * np.sqrt(3)
        got = pointwise_excess(Loss.ABSOLUTE, sigma, np.array([0.0]), np.array([u]))[0]
        if a == 0:
            assert got == pytest.approx(abs(u))
            return
        f = lambda e, s: abs(s - e) / (2 * a)
        want = quad(f, -a, a, args=(u,), points=[u] if abs(u) < a else None)[0] - quad(f, -a, a, args=(0.0,), points=[0.0])[0]
        assert got == pytest.approx(want, abs=1e-10)


    def test_absolute_excess_subnormal_noise(self):
        sigma = 2.2250738585e-313
        got = pointwise_excess(Loss.ABSOLUTE, sigma, np.zeros(3), np.array([1.0, 0.0, -1e-320]))
        np.testing.assert_allclose(got, [1.0, 0.0, 0.0], atol=1e-300)


class TestIsolation:
    def test_abundant_data(self):
        env = make_environment(Family.LINEAR_REGRESSION, 4, 2, 2, seed=0)
        head, rep = isolation_baseline(sample_task_dataset(env, 0, 200, 0), model_class_for(env), OptConfig(restarts=3))
        assert population_excess_risk(env, rep, head, 50_000, 0).value <= 1e-4

    def test_empty(self):
        env = make_environment(Family.LINEAR_REGRESSION, 4, 2, 2, seed=0)
        with pytest.raises(EmptyData):
            isolation_baseline(sample_task_dataset(env, 0, 0, 0), model_class_for(env))


class TestGradientAudit:
    def test_logistic(self):
        assert finite_difference_audit(Family.LINEAR_LOGISTIC, Loss.LOGISTIC, trials=100) <= 1e-4

    def test_squared_linear(self):
        assert finite_difference_audit(Family.LINEAR_REGRESSION, Loss.SQUARED, trials=100) <= 1e-6

    def test_absolute_index_skips_ties(self):
        assert finite_difference_audit(Family.INDEX_MODEL, Loss.ABSOLUTE, trials=100) <= 1e-4


def test_with_test_head_replaces_only_new_task():
    env = make_environment(Family.INDEX_MODEL, 3, 1, 2, seed=0)
    link = MonotoneLink(np.array([0.0, 1.0]), np.array([0.2, 0.4]))
    env2 = with_test_head(env, link)
    assert env2.heads_truth[0] is link and env2.heads_truth[1:] == env.heads_truth[1:]
    assert isinstance(env2.rep_truth, UnitDirection)
