import json
import os
import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_allclose

from fedcausal import _kernels_py as py
from fedcausal.kernels import BACKEND, GAUSSIAN, LOGIT

cy = pytest.importorskip("fedcausal._kernels")


@pytest.fixture
def problem():
    rng = np.random.default_rng(3)
    n, p = 500, 4
    X = np.ascontiguousarray(np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))]))
    beta = rng.normal(scale=0.5, size=p)
    y = (rng.random(n) < 0.4).astype(float)
    weights = rng.uniform(0.0, 2.0, size=n)
    return X, y, beta, weights


def test_backend_is_compiled_when_built():
    assert BACKEND == "cython"


@pytest.mark.parametrize("family", [LOGIT, GAUSSIAN])
def test_loglik_matches_fallback(problem, family):
    X, y, beta, weights = problem
    assert_allclose(cy.glm_loglik(X, y, beta, weights, family, 1.7),
                    py.glm_loglik(X, y, beta, weights, family, 1.7), rtol=1e-12)


@pytest.mark.parametrize("family", [LOGIT, GAUSSIAN])
def test_derivatives_match_fallback(problem, family):
    X, y, beta, weights = problem
    for a, b in zip(cy.glm_derivatives(X, y, beta, weights, family, 0.8),
                    py.glm_derivatives(X, y, beta, weights, family, 0.8)):
        assert_allclose(a, b, rtol=1e-11, atol=1e-11)


def test_weighted_crossprod_matches_numpy(problem):
    X, _, _, weights = problem
    Z = np.ascontiguousarray(X[:, :2] * 2.0)
    assert_allclose(cy.weighted_crossprod(X, Z, weights), (X * weights[:, None]).T @ Z,
                    rtol=1e-12)
    assert_allclose(py.weighted_crossprod(X, Z, weights), (X * weights[:, None]).T @ Z,
                    rtol=1e-12)


def test_logit_loglik_stable_for_large_eta():
    X = np.ones((2, 1))
    y = np.array([1.0, 0.0])
    for mod in (cy, py):
        ll = mod.glm_loglik(X, y, np.array([800.0]), np.ones(2), LOGIT, 1.0)
        assert_allclose(ll, -800.0)


def test_fallback_selected_by_environment_and_agrees():
    code = (
        "import json, numpy as np\n"
        "import fedcausal\n"
        "from fedcausal.glm import Family, fit_mle\n"
        "rng = np.random.default_rng(0)\n"
        "X = np.column_stack([np.ones(300), rng.normal(size=(300, 2))])\n"
        "y = (rng.random(300) < 0.4).astype(float)\n"
        "print(json.dumps([fedcausal.BACKEND, fit_mle(X, y, Family.logit()).beta_hat.tolist()]))\n"
    )
    results = {}
    for flag in ("1", "0"):
        env = dict(os.environ, FEDCAUSAL_PURE_PYTHON=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                             text=True, check=True).stdout
        backend, beta = json.loads(out)
        results[backend] = np.array(beta)
    assert set(results) == {"python", "cython"}
    assert_allclose(results["python"], results["cython"], rtol=1e-10)
