"""Augmented inverse-propensity weighting (AIPW) for ATE and ATT."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from fedcausal.data import Dataset, design_from_names
from fedcausal.errors import DimensionError, OverlapError
from fedcausal.glm import Family
from fedcausal.propensity import Estimand, check_hard_bounds, propensity_scores


class Provenance(str, enum.Enum):
    POOLED_FEDERATED = "pooled_federated"
    SITE_LOCAL = "site_local"


@dataclass(frozen=True)
class NuisanceModels:
    """Outcome-mean and propensity evaluators ``Dataset -> ndarray``."""

    mu1: Callable[[Dataset], np.ndarray]
    mu0: Callable[[Dataset], np.ndarray]
    e: Callable[[Dataset], np.ndarray]
    provenance: Provenance = Provenance.SITE_LOCAL


@dataclass(frozen=True)
class AipwResult:
    """Per-dataset AIPW estimate; ``var_scaled`` is per observation."""

    tau_hat: float
    var_scaled: float
    n: int
    estimand: Estimand
    provenance: Provenance | None = None

    @property
    def se(self) -> float:
        return float(np.sqrt(self.var_scaled / self.n))


def glm_nuisances(beta, outcome_names: Sequence[str], family: Family, gamma,
                  propensity_names: Sequence[str],
                  provenance: Provenance = Provenance.SITE_LOCAL) -> NuisanceModels:
    """Nuisance evaluators from GLM coefficients addressed by column name."""
    beta = np.array(beta, dtype=float)
    gamma = np.array(gamma, dtype=float)
    outcome_names = tuple(outcome_names)
    propensity_names = tuple(propensity_names)
    beta.setflags(write=False)
    gamma.setflags(write=False)

    def mu(value):
        def evaluate(data: Dataset) -> np.ndarray:
            return family.mean(design_from_names(data, outcome_names, treatment_value=value) @ beta)
        return evaluate

    def e(data: Dataset) -> np.ndarray:
        return propensity_scores(design_from_names(data, propensity_names), gamma)

    return NuisanceModels(mu(1), mu(0), e, Provenance(provenance))


def aipw_score(w, y, mu1, mu0, e, estimand):
    """Uncentered AIPW score, elementwise.

    ATE: ``mu1 - mu0 + w (y - mu1) / e - (1 - w)(y - mu0) / (1 - e)``.
    ATT: ``w (y - mu0) - e (1 - w)(y - mu0) / (1 - e)``; its sum divided by
    the number of treated units estimates the ATT.
    """
    w, y, mu1, mu0, e = (np.asarray(a, dtype=float) for a in (w, y, mu1, mu0, e))
    if np.any(~((e > 0.0) & (e < 1.0))):
        raise OverlapError("propensity must lie strictly inside (0, 1)")
    if Estimand.parse(estimand) is Estimand.ATE:
        out = mu1 - mu0 + w / e * (y - mu1) - (1.0 - w) / (1.0 - e) * (y - mu0)
    else:
        out = w * (y - mu0) - e * (1.0 - w) / (1.0 - e) * (y - mu0)
    return out if out.ndim else float(out)


def aipw_from_values(w, y, mu1, mu0, e, estimand, provenance=None) -> AipwResult:
    """AIPW estimate from precomputed nuisance values."""
    estimand = Estimand.parse(estimand)
    w = np.asarray(w, dtype=float)
    n = w.shape[0]
    if n == 0:
        raise DimensionError("empty dataset")
    check_hard_bounds(e)
    phi = aipw_score(w, y, mu1, mu0, e, estimand)
    if estimand is Estimand.ATE:
        tau = float(phi.mean())
        dev = phi - tau
        return AipwResult(tau, float(np.mean(dev * dev)), n, estimand, provenance)
    n_t = float(w.sum())
    if n_t == 0:
        raise DimensionError("ATT needs at least one treated unit")
    tau = float(phi.sum() / n_t)
    dev = phi - w * tau
    return AipwResult(tau, float((n / n_t) ** 2 * np.mean(dev * dev)), n, estimand, provenance)


def estimate_aipw(data: Dataset, nuisances: NuisanceModels, estimand) -> AipwResult:
    """AIPW point estimate and influence-function variance on one dataset.

    ATE: mean score and its sample variance. ATT: the score sum over the
    treated count ``n_t``; the variance is the mean square of the centered
    contributions ``phi_i - w_i tau`` times ``(n / n_t)^2``.
    """
    return aipw_from_values(data.w, data.y, nuisances.mu1(data), nuisances.mu0(data),
                            nuisances.e(data), estimand, nuisances.provenance)
