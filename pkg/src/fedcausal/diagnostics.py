"""Stability tests that help choose between restricted and unrestricted
federation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import chi2

from fedcausal._linalg import inv, sym
from fedcausal.errors import DimensionError

LEVELS = (0.10, 0.05, 0.01)


@dataclass(frozen=True)
class StabilityTestResult:
    t2: float
    dof: int
    p_value: float
    reject_at: dict
    subset: tuple = ()


@dataclass(frozen=True)
class PartitionProposal:
    """Advisory shared/unstable split with the p-values that led to it."""

    shared: tuple
    unstable: tuple
    full_test: StabilityTestResult
    coefficient_p_values: dict = field(default_factory=dict)
    remainder_test: StabilityTestResult | None = None


def _weight(var_a, n_a, var_b, n_b, weights):
    if weights == "sampling":
        return var_a / n_a + var_b / n_b
    if weights == "pooled":
        total = float(n_a + n_b) ** 2
        return n_a / total * var_a + n_b / total * var_b
    raise ValueError("weights must be 'sampling' or 'pooled'")


def hotelling_stability_test(beta_a, var_a, n_a, beta_b, var_b, n_b,
                             subset: Sequence[int] | None = None, *,
                             weights: str = "sampling") -> StabilityTestResult:
    """Two-sample chi-square test that two coefficient vectors are equal.

    ``T^2 = d^T W^{-1} d`` with ``d = beta_a - beta_b`` on ``subset`` and
    p-value from chi-square with ``len(subset)`` degrees of freedom.

    Parameters
    ----------
    var_a, var_b : per-observation asymptotic variances
    weights : {"sampling", "pooled"}
        ``"sampling"`` uses ``W = V_a / n_a + V_b / n_b``, the sampling
        variance of ``d``. ``"pooled"`` uses
        ``n_a / (n_a + n_b)^2 V_a + n_b / (n_a + n_b)^2 V_b``.
    """
    beta_a = np.atleast_1d(np.asarray(beta_a, dtype=float))
    beta_b = np.atleast_1d(np.asarray(beta_b, dtype=float))
    var_a = np.atleast_2d(np.asarray(var_a, dtype=float))
    var_b = np.atleast_2d(np.asarray(var_b, dtype=float))
    p = beta_a.shape[0]
    if beta_b.shape != (p,) or var_a.shape != (p, p) or var_b.shape != (p, p):
        raise DimensionError("inconsistent dimensions")
    idx = np.arange(p) if subset is None else np.asarray(list(subset), dtype=int)
    if idx.size == 0:
        raise DimensionError("empty subset")
    sub = np.ix_(idx, idx)
    w = sym(_weight(var_a[sub], n_a, var_b[sub], n_b, weights))
    d = beta_a[idx] - beta_b[idx]
    t2 = max(float(d @ inv(w, "stability weight matrix") @ d), 0.0)
    pval = float(chi2.sf(t2, idx.size))
    return StabilityTestResult(t2, int(idx.size), pval, {a: pval < a for a in LEVELS},
                               tuple(idx.tolist()))


def suggest_partition(beta_a, var_a, n_a, beta_b, var_b, n_b, alpha: float = 0.05, *,
                      names: Sequence[str] | None = None,
                      names_b: Sequence[str] | None = None,
                      weights: str = "sampling") -> PartitionProposal:
    """Greedy advisory split of coefficients into shared and unstable.

    Runs the full test. If it rejects at ``alpha``, tests each coefficient
    on its own, marks the rejecting ones unstable and re-tests the rest.
    When ``names_b`` is given, coefficients present at only one site are
    unstable without testing and the tests run on the common names.
    """
    beta_a = np.atleast_1d(np.asarray(beta_a, dtype=float))
    beta_b = np.atleast_1d(np.asarray(beta_b, dtype=float))
    var_a = np.atleast_2d(np.asarray(var_a, dtype=float))
    var_b = np.atleast_2d(np.asarray(var_b, dtype=float))
    names_a = tuple(names) if names is not None else tuple(f"b{j}" for j in range(beta_a.size))
    names_b = names_a if names_b is None else tuple(names_b)
    common = [n for n in names_a if n in names_b]
    only = tuple([n for n in names_a if n not in names_b] + [n for n in names_b if n not in names_a])
    ia = [names_a.index(n) for n in common]
    ib = [names_b.index(n) for n in common]
    ba, bb = beta_a[ia], beta_b[ib]
    va, vb = var_a[np.ix_(ia, ia)], var_b[np.ix_(ib, ib)]

    full = hotelling_stability_test(ba, va, n_a, bb, vb, n_b, weights=weights)
    if full.p_value >= alpha:
        return PartitionProposal(tuple(common), only, full)
    pvals = {}
    flagged = []
    for j, name in enumerate(common):
        r = hotelling_stability_test(ba, va, n_a, bb, vb, n_b, [j], weights=weights)
        pvals[name] = r.p_value
        if r.p_value < alpha:
            flagged.append(name)
    keep = [j for j, n in enumerate(common) if n not in flagged]
    remainder = None
    if keep:
        remainder = hotelling_stability_test(ba, va, n_a, bb, vb, n_b, keep, weights=weights)
    return PartitionProposal(tuple(common[j] for j in keep), only + tuple(flagged), full, pvals,
                             remainder)


def pairwise_stability(estimates: Sequence[tuple], alpha: float = 0.05, *,
                       weights: str = "sampling") -> list[dict]:
    """Test every site against the first with Bonferroni-adjusted ``alpha``.

    ``estimates`` holds ``(site_id, beta, var_scaled, n)`` tuples.
    """
    if len(estimates) < 2:
        return []
    ref_id, b0, v0, n0 = estimates[0]
    level = alpha / (len(estimates) - 1)
    out = []
    for site_id, b, v, n in estimates[1:]:
        r = hotelling_stability_test(b0, v0, n0, b, v, n, weights=weights)
        out.append({"reference": ref_id, "site": site_id, "t2": r.t2, "p_value": r.p_value,
                    "alpha": level, "reject": r.p_value < level})
    return out
