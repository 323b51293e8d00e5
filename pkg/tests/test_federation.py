import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import make_dataset
from fedcausal.aipw import Provenance
from fedcausal.data import Dataset, outcome_design
from fedcausal.errors import LayoutError, NonConvergenceError, ProvenanceError
from fedcausal.federation import (
    AipwSummary,
    PropensityMode,
    as_sites,
    default_layout,
    federated_aipw,
    federated_aipw_combine,
    federated_ipw_mle,
    federated_mle,
    federated_mle_from_data,
    site_aipw_summary,
    site_local_nuisances,
    site_mle_summary,
)
from fedcausal.glm import Family, fit_mle, robust_variance
from fedcausal.ipw_mle import fit_ipw_mle
from fedcausal.propensity import Estimand, fit_propensity, known_propensity
from fedcausal.weighting import GlobalLayout, Mode, Scheme


def _sites(linear=False, ns=(300, 500, 400), seed=0):
    return [make_dataset(n=n, seed=seed + k, site_id=f"s{k}", linear=linear)
            for k, n in enumerate(ns)]


def test_linear_restricted_equals_pooled_ols():
    sites = _sites(linear=True)
    pooled = Dataset.concat(sites)
    lay = default_layout(pooled)
    est = federated_mle_from_data(sites, lay, Family.linear())
    X, _ = outcome_design(pooled)
    assert_allclose(est.point, np.linalg.lstsq(X, pooled.y, rcond=None)[0], rtol=1e-10, atol=1e-12)
    assert est.n_pool == pooled.n
    assert est.scheme is Scheme.HESSIAN
    assert est.names == ("intercept", "w", "x1", "x2")


def test_linear_unrestricted_equals_pooled_ols_with_site_columns():
    sites = _sites(linear=True)
    lay = GlobalLayout.build(["intercept", "w", "x2"], {s.site_id: ["x1"] for s in sites})
    est = federated_mle_from_data(sites, lay, Family.linear(), Mode.UNRESTRICTED)
    blocks, ys = [], []
    for k, s in enumerate(sites):
        site_cols = np.zeros((s.n, len(sites)))
        site_cols[:, k] = s.column("x1")
        blocks.append(np.column_stack([np.ones(s.n), s.w, s.column("x2"), site_cols]))
        ys.append(s.y)
    ref = np.linalg.lstsq(np.vstack(blocks), np.concatenate(ys), rcond=None)[0]
    assert_allclose(est.point, ref, rtol=1e-10, atol=1e-12)
    assert est.names[3:] == ("x1[s0]", "x1[s1]", "x1[s2]")


def test_restricted_mode_rejects_unstable_layout():
    sites = _sites()
    lay = GlobalLayout.build(["intercept", "w", "x2"], {"s0": ["x1"]})
    with pytest.raises(LayoutError):
        federated_mle_from_data(sites, lay, Family.logit(), Mode.RESTRICTED)


def test_single_site_federation_is_local_fit():
    data = make_dataset(n=700, seed=3, site_id="only")
    lay = default_layout(data)
    est = federated_mle_from_data([data], lay, Family.logit())
    X, _ = outcome_design(data)
    fit = fit_mle(X, data.y, Family.logit())
    assert_allclose(est.point, fit.beta_hat, rtol=1e-12)
    assert_allclose(est.var_scaled, robust_variance(X, data.y, fit.beta_hat, Family.logit()),
                    rtol=1e-10)


def test_single_site_ipw_is_local_fit():
    data = make_dataset(n=700, seed=4, site_id="only")
    est = federated_ipw_mle([data], default_layout(data), default_layout(data, space="gamma"),
                            "att")
    prop = fit_propensity(data)
    fit = fit_ipw_mle(data, Family.logit(), prop, "att")
    assert_allclose(est.point, fit.beta_hat, rtol=1e-10)
    assert_allclose(est.var_scaled, fit.variance_scaled, rtol=1e-8)
    assert est.estimand is Estimand.ATT


def test_site_summary_is_zero_padded():
    sites = _sites()
    lay = GlobalLayout.build(["intercept", "w", "x2"], {"s0": ["x1"], "s1": ["x1"]})
    s = site_mle_summary(sites[1], "s1", lay, Family.logit())
    assert s.beta_pad[3] == 0.0 and s.beta_pad[4] != 0.0
    assert np.all(s.hessian_pad[3] == 0.0)
    assert np.all(s.bundle_pad.A_beta_varpi[:, 3] == 0.0)
    s2 = site_mle_summary(sites[2], "s2", lay, Family.logit())
    assert s2.names == ("intercept", "w", "x2")


def test_unoccupied_coordinates_are_nan():
    sites = _sites()[:2]
    lay = GlobalLayout.build(["intercept", "w", "x2"], {"s0": ["x1"], "s9": ["x1"]})
    est = federated_mle([site_mle_summary(s, s.site_id, lay, Family.logit()) for s in sites],
                        lay, Mode.UNRESTRICTED)
    assert np.isnan(est.coef("x1[s9]"))
    assert np.isfinite(est.coef("x1[s0]"))


def test_known_propensity_linear_ipw_equals_pooled_wls():
    sites = _sites(linear=True)
    pooled = Dataset.concat(sites)
    gamma = np.array([0.1, 0.4, 0.4])
    est = federated_ipw_mle(sites, default_layout(pooled), default_layout(pooled, space="gamma"),
                            "ate", PropensityMode.KNOWN_STABLE, family=Family.linear(),
                            known_gamma=gamma)
    prop = known_propensity(pooled, gamma)
    fit = fit_ipw_mle(pooled, Family.linear(), prop, "ate")
    assert_allclose(est.point, fit.beta_hat, rtol=1e-10)


def test_ipw_unstable_propensity():
    sites = _sites(ns=(800, 900))
    lb = default_layout(sites[0])
    lg = GlobalLayout.build(["intercept", "x2"], {"s0": ["x1"], "s1": ["x1"]})
    est = federated_ipw_mle(sites, lb, lg, "ate", PropensityMode.UNSTABLE)
    assert est.mode is Mode.UNRESTRICTED
    assert est.extras["gamma"].shape == (4,)
    assert np.all(np.isfinite(est.point))
    with pytest.raises(LayoutError):
        federated_ipw_mle(sites, lb, lg, "ate", PropensityMode.ESTIMATED_STABLE)


def test_restricted_aipw_needs_federated_nuisances():
    s = [AipwSummary("a", 100, 0.1, 1.0, Estimand.ATE, Provenance.SITE_LOCAL),
         AipwSummary("b", 100, 0.2, 1.0, Estimand.ATE, Provenance.POOLED_FEDERATED)]
    with pytest.raises(ProvenanceError):
        federated_aipw_combine(s, Mode.RESTRICTED)
    est = federated_aipw_combine(s, Mode.UNRESTRICTED)
    assert_allclose(est.point, 0.15)
    assert est.scheme is Scheme.SAMPLE_SIZE


def test_restricted_aipw_is_inverse_variance_of_sites():
    sites = _sites(ns=(600, 900))
    est = federated_aipw(sites, Mode.RESTRICTED, "ate")
    beta, gamma = est.extras["beta"], est.extras["gamma"]
    pooled = Dataset.concat(sites)
    assert_allclose(beta, federated_mle_from_data(sites, default_layout(pooled),
                                                  Family.logit()).point)
    taus, vs = [], []
    for s in sites:
        X1 = np.column_stack([np.ones(s.n), np.ones(s.n), s.x])
        X0 = np.column_stack([np.ones(s.n), np.zeros(s.n), s.x])
        Z = np.column_stack([np.ones(s.n), s.x])
        mu1, mu0 = 1 / (1 + np.exp(-X1 @ beta)), 1 / (1 + np.exp(-X0 @ beta))
        e = 1 / (1 + np.exp(-Z @ gamma))
        phi = mu1 - mu0 + s.w * (s.y - mu1) / e - (1 - s.w) * (s.y - mu0) / (1 - e)
        taus.append(phi.mean())
        vs.append(phi.var() / s.n)
    prec = 1 / np.array(vs)
    assert_allclose(est.point, np.sum(prec * taus) / prec.sum(), rtol=1e-12)
    assert_allclose(est.var_scaled, pooled.n / prec.sum(), rtol=1e-12)


def test_unrestricted_aipw_uses_local_nuisances():
    sites = _sites(ns=(600, 900))
    est = federated_aipw(sites, Mode.UNRESTRICTED, "att")
    lb, lg = default_layout(sites[0]), default_layout(sites[0], space="gamma")
    parts = [site_aipw_summary(s, s.site_id, site_local_nuisances(s, s.site_id, lb, lg,
                                                                 Family.logit()), "att")
             for s in sites]
    assert_allclose(est.point, (600 * parts[0].tau_hat + 900 * parts[1].tau_hat) / 1500)
    assert federated_aipw(parts, Mode.UNRESTRICTED).point == est.point


def test_as_sites_forms():
    a, b = make_dataset(n=50, site_id="b"), make_dataset(n=50, seed=1, site_id="a")
    assert [k for k, _ in as_sites([a, b])] == ["a", "b"]
    assert [k for k, _ in as_sites({"z": a, "y": b})] == ["y", "z"]
    assert [k for k, _ in as_sites([("q", a)])] == ["q"]
    with pytest.raises(LayoutError):
        as_sites([a, a])


def test_separated_site_is_a_model_failure():
    x = np.linspace(-1, 1, 60)[:, None]
    w = np.tile([0.0, 1.0], 30)
    y = (x[:, 0] > 0).astype(float)
    data = Dataset(x, w, y, ("x1",), site_id="sep")
    with pytest.warns(RuntimeWarning):
        with pytest.raises(NonConvergenceError):
            site_mle_summary(data, "sep", default_layout(data), Family.logit())


def test_estimate_accessors():
    sites = _sites()
    est = federated_mle_from_data(sites, default_layout(sites[0]), Family.logit())
    assert_allclose(est.coef_se("w"), np.sqrt(est.var_scaled[1, 1] / est.n_pool))
    lo, hi = est.ci95()
    assert_allclose(hi - lo, 2 * 1.96 * est.se)
