import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from divlearn.envs import CovariateModel, TaskEnvironment
from divlearn.models import Family, LinearHead, LinearSubspace

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def linear_env(B, A, a0, family=Family.LINEAR_REGRESSION, noise=0.0, Sigma=None, c1=2.0, c2=1.0, seed=0):
    """Environment with hand-picked truth: rows of ``A`` are the training heads."""
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    d = B.shape[0]
    Sigma = np.eye(d) if Sigma is None else np.asarray(Sigma, dtype=float)
    heads = (LinearHead(np.atleast_1d(np.asarray(a0, float)), c2),) + tuple(
        LinearHead(np.atleast_1d(np.asarray(a, float)), c2) for a in np.atleast_2d(A)
    )
    return TaskEnvironment(Family(family), CovariateModel(d, Sigma), LinearSubspace(B), heads, noise, c1, c2, 1.0, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def acceptance(request):
    """Record ``(criterion, passed, detail)`` for the end-of-run summary."""
    results = request.config.stash[ACCEPTANCE]

    def record(k, passed, detail):
        results[k] = (bool(passed), detail)
        print(f"criterion {k}: {'PASS' if passed else 'FAIL'} {detail}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        passed, detail = results[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
