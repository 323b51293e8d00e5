"""Propensity models, overlap diagnostics and inverse-propensity weights."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from fedcausal.data import Dataset, propensity_design
from fedcausal.errors import DimensionError, NonConvergenceError, OverlapError
from fedcausal.glm import Family, fit_mle

HARD_BOUNDS = (1e-6, 1.0 - 1e-6)


class Estimand(str, enum.Enum):
    ATE = "ate"
    ATT = "att"

    @classmethod
    def parse(cls, value) -> "Estimand":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


@dataclass(frozen=True)
class PropensityFit:
    """Fitted (or supplied) logit propensity model."""

    gamma_hat: np.ndarray
    hessian_at_opt: np.ndarray | None
    fitted_e: np.ndarray
    known: bool
    names: tuple
    converged: bool = True


@dataclass(frozen=True)
class OverlapReport:
    """Rows whose propensity falls outside ``(eta, 1 - eta)``."""

    eta: float
    violations: np.ndarray
    min_e: float
    max_e: float

    @property
    def n_violations(self) -> int:
        return int(self.violations.size)

    @property
    def ok(self) -> bool:
        return self.violations.size == 0


def propensity_scores(Z, gamma) -> np.ndarray:
    """Logit propensity ``expit(Z gamma)``."""
    return expit(np.asarray(Z, dtype=float) @ np.asarray(gamma, dtype=float))


def fit_propensity(data: Dataset, covariates: Sequence[str] | None = None,
                   *, require_converged: bool = True) -> PropensityFit:
    """Logit regression of treatment on ``(intercept, covariates)``."""
    Z, names = propensity_design(data, covariates)
    fit = fit_mle(Z, data.w, Family.logit())
    if require_converged and not fit.converged:
        raise NonConvergenceError("propensity model did not converge", fit)
    return PropensityFit(fit.beta_hat, fit.hessian_at_opt, propensity_scores(Z, fit.beta_hat),
                         False, names, fit.converged)


def known_propensity(data: Dataset, gamma, covariates: Sequence[str] | None = None) -> PropensityFit:
    """Wrap a supplied propensity coefficient vector."""
    Z, names = propensity_design(data, covariates)
    gamma = np.asarray(gamma, dtype=float).ravel()
    if gamma.shape[0] != Z.shape[1]:
        raise DimensionError(f"gamma has length {gamma.shape[0]}, expected {Z.shape[1]}")
    return PropensityFit(gamma, None, propensity_scores(Z, gamma), True, names)


def check_overlap(fit, eta: float) -> OverlapReport:
    """Report rows violating ``eta < e < 1 - eta``; never trims.

    ``fit`` is a :class:`PropensityFit` or an array of propensities.
    """
    if not 0.0 < eta < 0.5:
        raise ValueError("eta must lie in (0, 0.5)")
    e = np.asarray(fit.fitted_e if isinstance(fit, PropensityFit) else fit, dtype=float)
    bad = np.flatnonzero((e <= eta) | (e >= 1.0 - eta))
    return OverlapReport(float(eta), bad, float(e.min()), float(e.max()))


def check_hard_bounds(e, bounds=HARD_BOUNDS) -> None:
    """Raise :class:`OverlapError` if any propensity lies outside ``bounds``."""
    e = np.asarray(e, dtype=float)
    lo, hi = bounds
    bad = ~((e >= lo) & (e <= hi))
    if np.any(bad):
        idx = np.flatnonzero(bad)
        raise OverlapError(
            f"{idx.size} propensities outside [{lo:g}, {hi:g}] "
            f"(min {np.nanmin(e):.3g}, max {np.nanmax(e):.3g})"
        )


def ipw_weights(e, w, estimand, *, bounds=HARD_BOUNDS) -> np.ndarray:
    """Inverse-propensity weights.

    ATE: ``w/e + (1-w)/(1-e)``. ATT: ``w + e(1-w)/(1-e)``.

    Raises
    ------
    OverlapError
        If any ``e`` is outside ``(0, 1)`` or outside the hard-failure
        ``bounds``.
    """
    e = np.asarray(e, dtype=float)
    w = np.asarray(w, dtype=float)
    if e.shape != w.shape:
        raise DimensionError("e and w must have the same shape")
    if np.any(~((e > 0.0) & (e < 1.0))):
        raise OverlapError("propensities must lie strictly inside (0, 1)")
    check_hard_bounds(e, bounds)
    if Estimand.parse(estimand) is Estimand.ATE:
        return w / e + (1.0 - w) / (1.0 - e)
    return w + e * (1.0 - w) / (1.0 - e)
