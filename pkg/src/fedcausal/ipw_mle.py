"""IPW-MLE: weighted likelihood fits, the sandwich matrix bundle, the
variance with and without propensity estimation, and plug-in treatment
effects with delta-method variance.

Matrix conventions (all per-observation sample averages, ``varpi`` the IPW
weight, ``g = r x`` the row score, ``d = (w - e) z`` the propensity score):

* ``A_beta_varpi = mean(varpi c x x^T)``, minus the weighted Hessian over n
* ``D_beta_varpi = mean(varpi^2 g g^T)``
* ATE: ``C = mean(varpi g d^T)``
* ATT: ``C2 = mean(varpi g d^T)``, ``C1 = mean((1-w)/(1-e) g d^T)``
* ``A_gamma = mean(e(1-e) z z^T)``, ``B_gamma = mean(d d^T)``
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from fedcausal import kernels
from fedcausal._linalg import check_psd, sandwich, sym
from fedcausal.data import Dataset, design_from_names, outcome_design, propensity_design
from fedcausal.errors import DimensionError, NonConvergenceError
from fedcausal.glm import Family, fit_mle
from fedcausal.propensity import Estimand, PropensityFit, ipw_weights, propensity_scores

_PSD_TOL = 1e-6


@dataclass(frozen=True)
class MatrixBundle:
    """Per-observation sandwich ingredients for one dataset.

    For a plain (unweighted) MLE ``estimand`` is None, ``A_beta_varpi`` holds
    A_beta and ``D_beta_varpi`` holds B_beta.
    """

    A_beta_varpi: np.ndarray
    D_beta_varpi: np.ndarray
    n: int
    estimand: Estimand | None = None
    C: np.ndarray | None = None
    C1: np.ndarray | None = None
    C2: np.ndarray | None = None
    A_gamma: np.ndarray | None = None
    B_gamma: np.ndarray | None = None

    MATRIX_FIELDS = ("A_beta_varpi", "D_beta_varpi", "C", "C1", "C2", "A_gamma", "B_gamma")

    def matrices(self) -> dict:
        return {k: getattr(self, k) for k in self.MATRIX_FIELDS if getattr(self, k) is not None}

    def map(self, fn) -> "MatrixBundle":
        """Apply ``fn(name, matrix)`` to every present matrix."""
        return replace(self, **{k: fn(k, m) for k, m in self.matrices().items()})


def average_bundles(bundles: Sequence[MatrixBundle]) -> MatrixBundle:
    """Sample-size weighted average of bundles with identical structure."""
    if not bundles:
        raise DimensionError("no bundles to average")
    total = sum(b.n for b in bundles)
    first = bundles[0]
    keys = set(first.matrices())
    for b in bundles[1:]:
        if set(b.matrices()) != keys or b.estimand != first.estimand:
            raise DimensionError("bundles have different structure")
    out = {}
    for k in first.MATRIX_FIELDS:
        if k in keys:
            acc = np.zeros_like(getattr(first, k))
            for b in bundles:
                acc = acc + (b.n / total) * getattr(b, k)
            out[k] = acc
    return replace(first, n=total, **out)


@dataclass(frozen=True)
class IpwMleFit:
    """Result of :func:`fit_ipw_mle`."""

    beta_hat: np.ndarray
    bundle: MatrixBundle
    propensity_known: bool
    variance_scaled: np.ndarray
    hessian_at_opt: np.ndarray
    names: tuple
    estimand: Estimand
    converged: bool = True
    iterations: int = 0

    @property
    def n(self) -> int:
        return self.bundle.n

    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.variance_scaled) / self.n)


def bundle_from_arrays(X, y, beta, Z, w, gamma, family: Family, estimand,
                       *, residuals: str = "score") -> MatrixBundle:
    """Table of sandwich matrices evaluated at ``(beta, gamma)``.

    Parameters
    ----------
    X, y : outcome design and response
    Z, w : propensity design and treatment
    residuals : {"score", "working"}
        ``"score"`` uses the row score of the log-likelihood in ``D``.
        ``"working"`` replaces the residual with the GLM working residual
        ``(y - p) / (p (1 - p))`` for logit and ``y - x beta`` for linear.
    """
    estimand = Estimand.parse(estimand)
    X = np.ascontiguousarray(X, dtype=float)
    Z = np.ascontiguousarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    n = X.shape[0]
    if Z.shape[0] != n or y.shape[0] != n or w.shape[0] != n:
        raise DimensionError("outcome and propensity designs have different row counts")
    if n == 0:
        raise DimensionError("empty dataset")
    e = propensity_scores(Z, gamma)
    varpi = ipw_weights(e, w, estimand)
    r, c = family.row_factors(X, y, np.asarray(beta, dtype=float))
    if residuals == "working":
        if family.kind == "logit":
            r_d = r / c
        else:
            r_d = r * family.dispersion
    elif residuals == "score":
        r_d = r
    else:
        raise ValueError("residuals must be 'score' or 'working'")
    wcp = kernels.weighted_crossprod
    A = sym(wcp(X, X, np.ascontiguousarray(varpi * c)) / n)
    vr = varpi * r_d
    D = sym(wcp(X, X, np.ascontiguousarray(vr * vr)) / n)
    resid_w = w - e
    A_gamma = sym(wcp(Z, Z, np.ascontiguousarray(e * (1.0 - e))) / n)
    B_gamma = sym(wcp(Z, Z, np.ascontiguousarray(resid_w * resid_w)) / n)
    k_d = np.ascontiguousarray(varpi * r * resid_w)
    if estimand is Estimand.ATE:
        return MatrixBundle(A, D, n, estimand, C=wcp(X, Z, k_d) / n,
                            A_gamma=A_gamma, B_gamma=B_gamma)
    h_d = np.ascontiguousarray((1.0 - w) / (1.0 - e) * r * resid_w)
    return MatrixBundle(A, D, n, estimand, C1=wcp(X, Z, h_d) / n, C2=wcp(X, Z, k_d) / n,
                        A_gamma=A_gamma, B_gamma=B_gamma)


def estimate_bundle(data: Dataset, beta, gamma, family: Family, estimand, *,
                    outcome_covariates: Sequence[str] | None = None,
                    propensity_covariates: Sequence[str] | None = None,
                    residuals: str = "score") -> MatrixBundle:
    """Sandwich matrix bundle on ``data`` at ``(beta, gamma)``."""
    X, _ = outcome_design(data, outcome_covariates)
    Z, _ = propensity_design(data, propensity_covariates)
    beta = np.asarray(beta, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if beta.shape != (X.shape[1],) or gamma.shape != (Z.shape[1],):
        raise DimensionError("beta or gamma does not match the design widths")
    return bundle_from_arrays(X, data.y, beta, Z, data.w, gamma, family, estimand,
                              residuals=residuals)


def propensity_correction(bundle: MatrixBundle) -> np.ndarray:
    """The matrix ``M`` subtracted from ``D`` when the propensity is estimated.

    ATE: ``C V C^T``. ATT: ``C1 V C2^T + C2 V C1^T - C1 V C1^T``, with
    ``V = A_gamma^{-1} B_gamma A_gamma^{-1}``.
    """
    if bundle.A_gamma is None or bundle.B_gamma is None:
        raise DimensionError("bundle lacks propensity matrices")
    v_gamma = sandwich(bundle.A_gamma, bundle.B_gamma, "A_gamma")
    if bundle.estimand is Estimand.ATE:
        return sym(bundle.C @ v_gamma @ bundle.C.T)
    c1, c2 = bundle.C1, bundle.C2
    cross = c1 @ v_gamma @ c2.T
    return sym(cross + cross.T - c1 @ v_gamma @ c1.T)


def ipw_mle_variance(bundle: MatrixBundle, propensity_known: bool) -> np.ndarray:
    """Per-observation asymptotic variance of the IPW-MLE coefficients.

    Known propensity: ``A^{-1} D A^{-1}``. Estimated propensity:
    ``A^{-1} (D - M) A^{-1}`` with ``M`` from :func:`propensity_correction`.

    Raises
    ------
    SingularHessianError
        If ``A_beta_varpi`` or ``A_gamma`` is singular.
    NotPositiveSemidefiniteError
        If the result has an eigenvalue below ``-1e-6`` (relative).
    """
    middle = bundle.D_beta_varpi
    if not propensity_known:
        middle = middle - propensity_correction(bundle)
    v = sandwich(bundle.A_beta_varpi, middle, "A_beta_varpi")
    return check_psd(v, _PSD_TOL, "IPW-MLE variance")


def fit_ipw_mle(data: Dataset, family: Family, prop_fit: PropensityFit, estimand, *,
                outcome_covariates: Sequence[str] | None = None,
                residuals: str = "score", require_converged: bool = True) -> IpwMleFit:
    """Fit the inverse-propensity weighted likelihood.

    The propensity design is taken from ``prop_fit.names``.
    """
    estimand = Estimand.parse(estimand)
    X, names = outcome_design(data, outcome_covariates)
    Z = design_from_names(data, prop_fit.names)
    e = propensity_scores(Z, prop_fit.gamma_hat)
    varpi = ipw_weights(e, data.w, estimand)
    fit = fit_mle(X, data.y, family, weights=varpi)
    if require_converged and not fit.converged:
        raise NonConvergenceError("IPW-MLE did not converge", fit)
    bundle = bundle_from_arrays(X, data.y, fit.beta_hat, Z, data.w, prop_fit.gamma_hat, family,
                                estimand, residuals=residuals)
    v = ipw_mle_variance(bundle, prop_fit.known)
    return IpwMleFit(fit.beta_hat, bundle, prop_fit.known, v, fit.hessian_at_opt, names,
                     estimand, fit.converged, fit.iterations)


def effect_gradient(data: Dataset, beta, family: Family, estimand,
                    names: Sequence[str]):
    """Plug-in effect and its average gradient with respect to ``beta``.

    Returns ``(tau_hat, J_bar)`` where ``tau_hat`` averages
    ``mu1(x) - mu0(x)`` over all rows (ATE) or treated rows (ATT).
    """
    estimand = Estimand.parse(estimand)
    beta = np.asarray(beta, dtype=float)
    X1 = design_from_names(data, names, treatment_value=1)
    X0 = design_from_names(data, names, treatment_value=0)
    rows = slice(None)
    if estimand is Estimand.ATT:
        rows = data.w == 1.0
        if not np.any(rows):
            raise DimensionError("ATT needs at least one treated row")
        X1, X0 = X1[rows], X0[rows]
    eta1, eta0 = X1 @ beta, X0 @ beta
    mu1, mu0 = family.mean(eta1), family.mean(eta0)
    d1, d0 = family.mean_derivative(eta1), family.mean_derivative(eta0)
    J = (d1[:, None] * X1 - d0[:, None] * X0).mean(axis=0)
    return float(np.mean(mu1 - mu0)), J


def treatment_effect_from_ipw_mle(data: Dataset, fit: IpwMleFit, family: Family,
                                  estimand=None) -> tuple[float, float]:
    """Plug-in treatment effect and delta-method variance ``J^T V J``.

    Returns ``(tau_hat, var_scaled)``; the standard error is
    ``sqrt(var_scaled / n)``.
    """
    estimand = fit.estimand if estimand is None else Estimand.parse(estimand)
    tau, J = effect_gradient(data, fit.beta_hat, family, estimand, fit.names)
    return tau, float(J @ fit.variance_scaled @ J)


__all__ = [
    "IpwMleFit",
    "MatrixBundle",
    "average_bundles",
    "bundle_from_arrays",
    "effect_gradient",
    "estimate_bundle",
    "fit_ipw_mle",
    "ipw_mle_variance",
    "propensity_correction",
    "treatment_effect_from_ipw_mle",
]
