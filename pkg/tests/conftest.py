import numpy as np
import pytest
from scipy.special import expit

from fedcausal.data import Dataset

ACCEPTANCE_LINES = []


def _record(number, passed, detail):
    ACCEPTANCE_LINES.append((number, passed, detail))


@pytest.fixture
def acceptance_record():
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES, key=lambda t: t[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


def make_dataset(n=400, p=2, seed=0, beta=None, gamma=None, site_id=None, linear=False):
    """Small confounded dataset with a logit (or Gaussian) outcome."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, p))
    gamma = np.r_[0.1, 0.4 * np.ones(p)] if gamma is None else np.asarray(gamma)
    e = expit(gamma[0] + x @ gamma[1:])
    w = (rng.random(n) < e).astype(float)
    beta = np.r_[-0.3, 0.5, 0.3 * np.ones(p)] if beta is None else np.asarray(beta)
    eta = beta[0] + beta[1] * w + x @ beta[2:]
    if linear:
        y = eta + rng.normal(size=n)
    else:
        y = (rng.random(n) < expit(eta)).astype(float)
    names = tuple(f"x{j + 1}" for j in range(p))
    return Dataset(x, w, y, names, site_id=site_id)


@pytest.fixture
def dataset():
    return make_dataset()
