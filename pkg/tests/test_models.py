import itertools

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from divlearn.errors import BadLabel, DimMismatch, Empty, IncompatibleVariants
from divlearn.models import (
    LinearHead,
    LinearSubspace,
    Loss,
    MonotoneLink,
    TanhMlp,
    UnitDirection,
    fit_link,
    flatten,
    grad_params,
    head_array,
    head_with,
    inf_to_two_norm,
    link_is_feasible,
    link_objective,
    loss_value,
    predict,
    project_constraints,
    rep_arrays,
    rep_forward,
    rep_with,
    unflatten,
)
from divlearn.numlin import qr_orthonormalize, subspace_sine


def random_mlp(g, widths, caps=None):
    ws = tuple(g.standard_normal((widths[k + 1], widths[k])) for k in range(len(widths) - 1))
    return TanhMlp(ws, caps or (np.inf,) * len(ws))


def link_dp_oracle(z, y, step=1e-3):
    """Minimum of sum (v_i - y_i)^2 over a value grid, by dynamic programming.

    The window for each step is the set of grid values reachable within the
    slope cap, so every grid path is feasible.
    """
    order = np.argsort(z)
    z, y = z[order], y[order]
    grid = np.round(np.arange(0.0, 1.0 + step / 2, step), 12)
    cost = (grid - y[0]) ** 2
    for i in range(1, len(z)):
        w = int(np.floor((z[i] - z[i - 1]) / step + 1e-9))
        best = np.array([cost[max(0, k - w) : k + 1].min() for k in range(len(grid))])
        cost = best + (grid - y[i]) ** 2
    return float(cost.min())


class TestForward:
    def test_linear_subspace(self):
        rep = LinearSubspace(np.eye(3)[:, :2])
        np.testing.assert_allclose(rep_forward(rep, np.array([3.0, 5.0, 7.0])), [3.0, 5.0])

    def test_zero_mlp(self, rng):
        rep = TanhMlp((np.zeros((4, 3)), np.zeros((2, 4))), (1.0, 1.0))
        np.testing.assert_array_equal(rep_forward(rep, rng.standard_normal((5, 3))), np.zeros((5, 2)))

    def test_scalar_mlp_matches_high_precision_tanh(self):
        # 1-1-1 network with a tanh hidden unit and identity output
        rep = TanhMlp((np.array([[1.0]]), np.array([[1.0]])), (1.0, 1.0))
        oracle = float(mpmath.tanh(mpmath.mpf("0.5")))
        assert rep_forward(rep, np.array([0.5]))[0] == pytest.approx(oracle, abs=1e-15)
        assert oracle == pytest.approx(0.46211716, abs=1e-8)

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            rep_forward(LinearSubspace(np.eye(3)[:, :1]), np.ones(4))

    @given(st.integers(0, 10_000))
    def test_mlp_output_bounded_by_last_layer_norm(self, seed):
        g = np.random.default_rng(seed)
        rep = random_mlp(g, (3, 5, 2))
        X = 10 * g.standard_normal((50, 3))
        bound = inf_to_two_norm(rep.weights[-1])
        assert np.linalg.norm(rep_forward(rep, X), axis=1).max() <= bound + 1e-12


class TestPredict:
    def test_linear_head(self):
        rep = LinearSubspace(np.eye(2))
        assert predict(rep, LinearHead(np.array([1.0, -1.0])), np.array([2.0, 5.0])) == pytest.approx(-3.0)

    def test_identity_ramp(self):
        link = MonotoneLink(np.array([0.0, 1.0]), np.array([0.0, 1.0]))
        assert predict(UnitDirection(np.array([1.0, 0.0])), link, np.array([0.25, 9.0])) == pytest.approx(0.25)

    def test_constant_extrapolation(self):
        link = MonotoneLink(np.array([0.0, 0.5, 1.0]), np.array([0.1, 0.3, 0.6]))
        rep = UnitDirection(np.array([1.0]))
        assert predict(rep, link, np.array([7.0])) == pytest.approx(0.6)
        assert predict(rep, link, np.array([-7.0])) == pytest.approx(0.1)

    def test_incompatible(self):
        with pytest.raises(IncompatibleVariants):
            predict(UnitDirection(np.array([1.0])), LinearHead(np.array([1.0])), np.array([1.0]))
        with pytest.raises(IncompatibleVariants):
            predict(LinearSubspace(np.eye(1)), MonotoneLink(np.array([0.0, 1.0]), np.array([0.0, 1.0])), np.array([1.0]))


class TestLosses:
    def test_logistic_at_zero(self):
        assert loss_value(Loss.LOGISTIC, 0.0, 1.0) == pytest.approx(np.log(2), abs=1e-15)

    def test_squared(self):
        assert loss_value(Loss.SQUARED, 2.0, 5.0) == 9.0

    def test_absolute(self):
        assert loss_value(Loss.ABSOLUTE, 2.0, 5.0) == 3.0

    def test_logistic_large_margin_high_precision(self):
        oracle = float(30 + mpmath.log1p(mpmath.exp(-30)))
        v = loss_value(Loss.LOGISTIC, 30.0, 0.0)
        assert np.isfinite(v)
        assert v == pytest.approx(oracle, rel=1e-15)

    def test_bad_label(self):
        with pytest.raises(BadLabel):
            loss_value(Loss.LOGISTIC, 0.0, 0.5)

    @given(st.floats(-20, 20), st.sampled_from([0.0, 1.0]))
    def test_logistic_stable_form_equivalence(self, z, y):
        # the textbook form, evaluated in high precision
        with mpmath.workdps(50):
            s = 1 / (1 + mpmath.exp(-mpmath.mpf(z)))
            naive = float(-y * mpmath.log(s) - (1 - y) * mpmath.log(1 - s))
        assert abs(loss_value(Loss.LOGISTIC, z, y) - naive) < 1e-12 * max(1.0, abs(naive))


def _fd_rep_grad(loss, rep, head, X, y, h=1e-6):
    arrays = rep_arrays(rep)
    vec = flatten(arrays)
    out = np.empty_like(vec)
    for i in range(vec.size):
        e = np.zeros_like(vec)
        e[i] = h
        fp = np.mean(loss_value(loss, predict(rep_with(rep, unflatten(vec + e, arrays)), head, X), y))
        fm = np.mean(loss_value(loss, predict(rep_with(rep, unflatten(vec - e, arrays)), head, X), y))
        out[i] = (fp - fm) / (2 * h)
    return out


class TestGradients:
    def test_squared_head_gradient_analytic(self, rng):
        B = qr_orthonormalize(rng.standard_normal((4, 2)))
        rep, head = LinearSubspace(B), LinearHead(np.array([0.3, -0.7]))
        x, y = rng.standard_normal(4), 1.3
        _, g_head = grad_params(Loss.SQUARED, rep, head, x, y)
        h = B.T @ x
        np.testing.assert_allclose(g_head, 2 * (h @ head.alpha - y) * h, atol=1e-14)

    def test_zero_network_zero_gradients(self, rng):
        rep = TanhMlp((np.zeros((3, 2)), np.zeros((2, 3))), (1.0, 1.0))
        head = LinearHead(np.zeros(2))
        g_rep, g_head = grad_params(Loss.SQUARED, rep, head, rng.standard_normal((4, 2)), np.zeros(4))
        assert all(np.all(g == 0) for g in g_rep)
        assert np.all(g_head == 0)

    def test_three_layer_network_finite_differences(self, rng):
        for _ in range(10):
            rep = random_mlp(rng, (3, 4, 3, 2))
            head = LinearHead(rng.standard_normal(2))
            X, y = rng.standard_normal((6, 3)), rng.standard_normal(6)
            g_rep, _ = grad_params(Loss.SQUARED, rep, head, X, y)
            fd = _fd_rep_grad(Loss.SQUARED, rep, head, X, y)
            an = flatten(g_rep)
            assert np.max(np.abs(an - fd) / np.maximum(np.abs(fd), 1e-3)) < 1e-4

    def test_flat_roundtrip(self, rng):
        rep = random_mlp(rng, (3, 4, 2))
        arrays = rep_arrays(rep)
        back = unflatten(flatten(arrays), arrays)
        assert all(np.array_equal(a, b) for a, b in zip(arrays, back))
        head = LinearHead(np.array([1.0, 2.0]), 3.0)
        assert head_with(head, head_array(head) * 2).cap == 3.0


class TestInfToTwoNorm:
    @staticmethod
    def brute(W):
        m = W.shape[1]
        return max(np.linalg.norm(W @ np.array(s)) for s in itertools.product((-1.0, 1.0), repeat=m))

    @given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 9))
    def test_exact_against_enumeration(self, seed, k, m):
        W = np.random.default_rng(seed).standard_normal((k, m))
        assert inf_to_two_norm(W) == pytest.approx(self.brute(W), rel=1e-12)

    def test_large_case_is_upper_bound(self, rng):
        W = rng.standard_normal((3, 20))
        assert inf_to_two_norm(W) >= inf_to_two_norm(W, exact_limit=20) - 1e-12


class TestProjectConstraints:
    def test_head_rescaled(self):
        out = project_constraints(LinearHead(np.array([2.0, 0.0]), 1.0))
        np.testing.assert_allclose(out.alpha, [1.0, 0.0])

    def test_feasible_unchanged(self):
        head = LinearHead(np.array([0.3, 0.4]), 1.0)
        assert project_constraints(head) is head

    def test_perturbed_subspace(self, rng):
        B0 = qr_orthonormalize(rng.standard_normal((6, 2)))
        out = project_constraints(LinearSubspace(B0 + 1e-3 * rng.standard_normal((6, 2))))
        np.testing.assert_allclose(out.B.T @ out.B, np.eye(2), atol=1e-10)
        assert subspace_sine(out.B, B0) < 2e-3

    def test_network_caps(self, rng):
        rep = project_constraints(random_mlp(rng, (4, 6, 3), caps=(1.5, 2.0)))
        assert np.abs(rep.weights[0]).sum(axis=1).max() <= 1.5 + 1e-12
        assert inf_to_two_norm(rep.weights[-1]) <= 2.0 + 1e-12

    @given(st.integers(0, 10_000))
    def test_idempotent(self, seed):
        g = np.random.default_rng(seed)
        cases = [
            LinearSubspace(g.standard_normal((4, 2))),
            LinearHead(3 * g.standard_normal(3), 1.0),
            UnitDirection(3 * g.standard_normal(3), 1.0),
            random_mlp(g, (3, 4, 2), caps=(1.0, 1.5)),
            MonotoneLink(np.sort(g.uniform(-2, 2, 5)), g.uniform(-0.5, 1.5, 5)),
        ]
        for p in cases:
            once = project_constraints(p)
            twice = project_constraints(once)
            for a, b in zip(flatten_any(once), flatten_any(twice)):
                assert np.max(np.abs(a - b)) <= 1e-12


def flatten_any(p):
    if isinstance(p, LinearHead):
        return [p.alpha]
    if isinstance(p, MonotoneLink):
        return [p.knots, p.values]
    return list(rep_arrays(p))


class TestFitLink:
    def test_identity_ramp_fixed_point(self):
        z = np.linspace(0.0, 1.0, 11)
        link = fit_link(z, z.copy())
        np.testing.assert_allclose(link.values, z, atol=1e-9)

    def test_constant(self, rng):
        z = rng.uniform(-2, 2, 40)
        link = fit_link(z, np.full(40, 0.7))
        np.testing.assert_allclose(link.values, 0.7, atol=1e-12)

    def test_empty(self):
        with pytest.raises(Empty):
            fit_link([], [])

    def test_six_points_match_grid_oracle(self, rng):
        for _ in range(5):
            # knots on the oracle's grid so slope limits are representable
            z = np.unique(np.round(rng.uniform(0, 1.5, 6), 3))
            y = rng.uniform(-0.2, 1.2, 6)
            link = fit_link(z, y)
            obj = link_objective(link, z, y)
            oracle = link_dp_oracle(z, y)
            assert obj <= oracle + 1e-12
            assert oracle - obj < 1e-4

    @given(st.integers(0, 10_000), st.integers(1, 60))
    def test_output_always_feasible(self, seed, n):
        g = np.random.default_rng(seed)
        z = g.normal(0, 2, n)
        y = g.uniform(-1, 2, n)
        assert link_is_feasible(fit_link(z, y))
