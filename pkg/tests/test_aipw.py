import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import expit

from conftest import make_dataset
from fedcausal.aipw import (
    Provenance,
    aipw_from_values,
    aipw_score,
    estimate_aipw,
    glm_nuisances,
)
from fedcausal.errors import DimensionError, OverlapError
from fedcausal.glm import Family

BETA = np.array([-0.3, 0.5, 0.3, 0.3])
GAMMA = np.array([0.1, 0.4, 0.4])


def _truth_nuisances(data):
    eta0 = BETA[0] + data.x @ BETA[2:]
    mu1, mu0 = expit(eta0 + BETA[1]), expit(eta0)
    e = expit(GAMMA[0] + data.x @ GAMMA[1:])
    return mu1, mu0, e


def test_score_formulas():
    w = np.array([1.0, 0.0])
    y = np.array([1.0, 1.0])
    mu1, mu0, e = np.array([0.6, 0.7]), np.array([0.4, 0.2]), np.array([0.5, 0.25])
    ate = aipw_score(w, y, mu1, mu0, e, "ate")
    assert_allclose(ate, [0.2 + 0.4 / 0.5, 0.5 - 0.8 / 0.75])
    att = aipw_score(w, y, mu1, mu0, e, "att")
    assert_allclose(att, [0.6, -0.25 / 0.75 * 0.8])
    assert isinstance(aipw_score(1.0, 1.0, 0.5, 0.5, 0.5, "ate"), float)
    with pytest.raises(OverlapError):
        aipw_score(w, y, mu1, mu0, np.array([1.0, 0.5]), "ate")


def test_ate_estimate_and_variance_definitions():
    rng = np.random.default_rng(0)
    n = 50
    w = (rng.random(n) < 0.5).astype(float)
    y = rng.random(n)
    mu1, mu0, e = rng.uniform(0.2, 0.8, (3, n))
    r = aipw_from_values(w, y, mu1, mu0, e, "ate")
    phi = mu1 - mu0 + w * (y - mu1) / e - (1 - w) * (y - mu0) / (1 - e)
    assert_allclose(r.tau_hat, phi.mean())
    assert_allclose(r.var_scaled, phi.var())
    assert_allclose(r.se, phi.std() / np.sqrt(n))


def test_att_estimate_definition():
    rng = np.random.default_rng(1)
    n = 60
    w = (rng.random(n) < 0.4).astype(float)
    y = rng.random(n)
    mu1, mu0, e = rng.uniform(0.2, 0.8, (3, n))
    r = aipw_from_values(w, y, mu1, mu0, e, "att")
    n_t = w.sum()
    phi = w * (y - mu0) - e * (1 - w) / (1 - e) * (y - mu0)
    assert_allclose(r.tau_hat, phi.sum() / n_t)
    assert_allclose(r.var_scaled, (n / n_t) ** 2 * np.mean((phi - w * r.tau_hat) ** 2))
    with pytest.raises(DimensionError):
        aipw_from_values(np.zeros(3), np.zeros(3), mu1[:3], mu0[:3], e[:3], "att")


@pytest.mark.parametrize("estimand", ["ate", "att"])
def test_double_robustness(estimand):
    data = make_dataset(n=200_000, seed=21, beta=BETA, gamma=GAMMA)
    mu1, mu0, e = _truth_nuisances(data)
    rows = slice(None) if estimand == "ate" else data.w == 1
    truth = float(np.mean((mu1 - mu0)[rows]))
    flat = np.full(data.n, 0.5)
    good_e = aipw_from_values(data.w, data.y, flat, flat, e, estimand)
    good_mu = aipw_from_values(data.w, data.y, mu1, mu0, flat, estimand)
    both_bad = aipw_from_values(data.w, data.y, flat, flat, flat, estimand)
    assert abs(good_e.tau_hat - truth) < 4 * good_e.se
    assert abs(good_mu.tau_hat - truth) < 4 * good_mu.se
    assert abs(both_bad.tau_hat - truth) > 10 * both_bad.se


@pytest.mark.parametrize("estimand", ["ate", "att"])
def test_variance_matches_monte_carlo(estimand):
    n, reps = 1000, 400
    taus, vs = [], []
    for rep in range(reps):
        data = make_dataset(n=n, seed=500 + rep, beta=BETA, gamma=GAMMA)
        r = aipw_from_values(data.w, data.y, *_truth_nuisances(data), estimand)
        taus.append(r.tau_hat)
        vs.append(r.var_scaled)
    assert_allclose(np.mean(vs), n * np.var(taus, ddof=1), rtol=0.2)


def test_glm_nuisances_evaluate_by_name(dataset):
    nz = glm_nuisances(BETA, ("intercept", "w", "x1", "x2"), Family.logit(), GAMMA,
                       ("intercept", "x1", "x2"), Provenance.POOLED_FEDERATED)
    mu1, mu0, e = _truth_nuisances(dataset)
    assert_allclose(nz.mu1(dataset), mu1)
    assert_allclose(nz.mu0(dataset), mu0)
    assert_allclose(nz.e(dataset), e)
    r = estimate_aipw(dataset, nz, "ate")
    assert r.provenance is Provenance.POOLED_FEDERATED
    assert_allclose(r.tau_hat, aipw_from_values(dataset.w, dataset.y, mu1, mu0, e, "ate").tau_hat)
