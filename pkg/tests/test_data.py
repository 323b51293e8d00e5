import numpy as np
import pytest
from numpy.testing import assert_allclose

from fedcausal.data import Dataset, design_from_names, outcome_design, propensity_design
from fedcausal.errors import DimensionError, NonFiniteError


def _ds(**kw):
    base = dict(x=np.arange(6.0).reshape(3, 2), w=[0, 1, 1], y=[0.5, 1.0, 2.0],
                covariate_names=("a", "b"))
    base.update(kw)
    return Dataset(**base)


def test_designs():
    d = _ds()
    X, names = outcome_design(d)
    assert names == ("intercept", "w", "a", "b")
    assert_allclose(X, [[1, 0, 0, 1], [1, 1, 2, 3], [1, 1, 4, 5]])
    assert X.flags.c_contiguous
    Z, gnames = propensity_design(d, ["b"])
    assert gnames == ("intercept", "b")
    assert_allclose(Z, [[1, 1], [1, 3], [1, 5]])
    X1 = design_from_names(d, ("w", "a"), treatment_value=1)
    assert_allclose(X1[:, 0], 1.0)


def test_validation():
    with pytest.raises(DimensionError):
        _ds(w=[0, 1])
    with pytest.raises(DimensionError):
        _ds(w=[0, 2, 1])
    with pytest.raises(DimensionError):
        _ds(covariate_names=("a", "a"))
    with pytest.raises(DimensionError):
        _ds(covariate_names=("a", "w"))
    with pytest.raises(NonFiniteError):
        _ds(y=[0.0, np.nan, 1.0])
    with pytest.raises(DimensionError):
        _ds().column("zz")


def test_read_only_and_helpers():
    d = _ds()
    with pytest.raises(ValueError):
        d.x[0, 0] = 1.0
    assert d.n == 3 and d.n_treated == 2
    assert d.take([2]).n == 1
    assert d.with_site_id("s").site_id == "s"
    both = Dataset.concat([d, d], site_id="p")
    assert both.n == 6 and both.site_id == "p"
    with pytest.raises(DimensionError):
        Dataset.concat([d, _ds(covariate_names=("a", "c"))])


def test_no_covariates():
    d = Dataset(np.empty((4, 0)), [0, 1, 0, 1], [1, 2, 3, 4], ())
    X, names = outcome_design(d)
    assert names == ("intercept", "w") and X.shape == (4, 2)
