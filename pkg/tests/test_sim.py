import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import expit

from fedcausal import sim


def test_rng_streams_are_reproducible_and_distinct():
    a = sim.rng_for(1, 2, 0).random(5)
    assert_allclose(a, sim.rng_for(1, 2, 0).random(5), rtol=0, atol=0)
    assert not np.allclose(a, sim.rng_for(1, 2, 1).random(5))
    assert not np.allclose(a, sim.rng_for(1, 3, 0).random(5))


def test_generate_dgp():
    cfg = sim.base_config(300, 2, seed=4)
    d = sim.generate_dgp(cfg, 7)
    assert d.n == 300 and d.covariate_names == ("x1",)
    assert np.all(np.abs(d.x) <= 1.0)
    again = sim.generate_dgp(cfg, 7)
    assert_allclose(d.y, again.y, rtol=0, atol=0)
    assert sim.generate_dgp(cfg, 7, n=50).n == 50
    with pytest.raises(ValueError):
        sim.DgpConfig(beta0=(0.0, 0.0))


def test_dr_settings():
    full = sim.dr_config(1)
    assert full.outcome_covariates == ("x1", "x2", "x3")
    lb, lg = sim.dr_config(4).layouts()
    assert lb.shared_names == ("intercept", "w", "x1", "x2")
    assert lg.shared_names == ("intercept", "x1", "x2")
    assert sim.dr_config(2).propensity_covariates == ("x1", "x2", "x3")
    assert sim.dr_config(3).outcome_covariates == ("x1", "x2", "x3")
    with pytest.raises(ValueError):
        sim.dr_config(5)


def test_split_sites_partitions_rows():
    d = sim.generate_dgp(sim.base_config(101), 0)
    parts = sim.split_sites(d, 5, seed=0, rep=3)
    assert [p.site_id for p in parts] == [f"site{k}" for k in range(1, 6)]
    assert sorted(p.n for p in parts) == [20, 20, 20, 20, 21]
    assert_allclose(np.sort(np.concatenate([p.x[:, 0] for p in parts])), np.sort(d.x[:, 0]))
    assert sim.split_sites(d, 1)[0].n == 101


def test_demographic_partition_shifts_mix():
    d = sim.generate_dgp(sim.base_config(4000), 0)
    lo, hi = sim.demographic_partition(d, "x1", [0.2, 0.8], 1000)
    assert hi.column("x1").mean() > lo.column("x1").mean() + 0.3


def test_mc_truth_against_closed_form():
    # no covariate effect: the ATE is a difference of two constants
    val, se = sim.mc_truth((-0.2, 0.7, 0.0), 1, draws=10_000)
    assert_allclose(val, expit(0.5) - expit(-0.2), rtol=1e-12)
    assert se < 1e-12
    # one covariate: compare against numerical quadrature over unif(-1, 1)
    grid = np.linspace(-1, 1, 200_001)
    f = expit(-0.2 - 0.3 + 0.5 * grid) - expit(-0.2 + 0.5 * grid)
    quad = np.trapezoid(f, grid) / 2.0
    val, se = sim.mc_truth((-0.2, -0.3, 0.5), 1, draws=2_000_000)
    assert abs(val - quad) < 5 * se
    att, _ = sim.mc_truth((-0.2, -0.3, 0.5), 1, "att", (0.1, 0.2), draws=2_000_000)
    e = expit(0.1 + 0.2 * grid)
    assert abs(att - np.trapezoid(e * f, grid) / np.trapezoid(e, grid)) < 1e-3


def test_small_experiments_run():
    rows = sim.standardization_experiment(n_pools=(400,), Ds=(1, 2), reps=4, truth_draws=10_000)
    assert len(rows) == 6
    assert {r["estimator"] for r in rows} == {"mle", "ipw-mle", "aipw"}
    dr = sim.double_robustness_experiment(reps=2, n_pool=2000, settings=(1, 4),
                                          truth_draws=10_000)
    assert [r["setting"] for r in dr] == [1, 4]
    cov = sim.coverage_experiment(reps=5, n_pool=500)
    assert 0.0 <= cov["coverage"] <= 1.0
    eff = sim.efficiency_experiment(reps=3, n_pool=600)
    assert eff["restricted_var"].shape == (3,)
    hot = sim.hotelling_experiment(reps=3, n_per_site=500)
    assert hot["shift"] == 0.0
    pe = sim.pooled_equivalence_experiment(reps=1, n_pool=1000)
    assert set(pe) == {"mle", "ipw-mle"}


def test_workers_do_not_change_results():
    kw = dict(n_pools=(300,), Ds=(2,), reps=4, truth_draws=10_000, estimators=("mle",))
    serial = sim.standardization_experiment(**kw)
    parallel = sim.standardization_experiment(workers=2, **kw)
    assert serial == parallel


def test_output_formats():
    rows = [{"a": 1, "b": 0.123456}, {"a": 2, "b": 1.5}]
    assert sim.to_csv(rows).splitlines() == ["a,b", "1,0.123456", "2,1.5"]
    text = sim.to_text(rows, note="n")
    assert "0.123" in text and text.rstrip().endswith("n")
    assert sim.to_text([]) == ""
