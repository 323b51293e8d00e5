"""Logit and linear-Gaussian GLMs: likelihoods, derivatives, Newton solver
and sandwich variance.

All functions take a design matrix ``X`` (with an explicit intercept column)
and a response ``y``. Optional nonnegative ``weights`` multiply each row's
log-likelihood contribution.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from fedcausal import kernels
from fedcausal._linalg import sandwich, sym
from fedcausal.errors import DimensionError, NonFiniteError, SingularHessianError

GRADIENT_TOL = 1e-8
MAX_ITER = 100
MAX_HALVINGS = 30
SEPARATION_ETA = 30.0


@dataclass(frozen=True)
class Family:
    """Outcome family.

    Parameters
    ----------
    kind : {"logit", "linear"}
    dispersion : float
        Error variance of the linear-Gaussian family. It is held fixed
        while fitting; ignored for logit.
    """

    kind: str
    dispersion: float = 1.0

    def __post_init__(self):
        kind = {"logit": "logit", "logistic": "logit", "linear": "linear",
                "gaussian": "linear"}.get(str(self.kind).lower())
        if kind is None:
            raise ValueError(f"unknown family {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if not (np.isfinite(self.dispersion) and self.dispersion > 0):
            raise ValueError("dispersion must be positive")

    @classmethod
    def logit(cls) -> "Family":
        return cls("logit")

    @classmethod
    def linear(cls, dispersion: float = 1.0) -> "Family":
        return cls("linear", dispersion)

    @property
    def code(self) -> int:
        return kernels.LOGIT if self.kind == "logit" else kernels.GAUSSIAN

    def mean(self, eta):
        return expit(eta) if self.kind == "logit" else np.asarray(eta, dtype=float)

    def mean_derivative(self, eta):
        """d mu / d eta."""
        if self.kind == "logit":
            mu = expit(eta)
            return mu * (1.0 - mu)
        return np.ones_like(np.asarray(eta, dtype=float))

    def row_factors(self, X, y, beta):
        """Per-row score factor ``r`` and curvature ``c``.

        The row score is ``r_i x_i`` and the row Hessian is ``-c_i x_i x_i^T``.
        """
        eta = X @ beta
        if self.kind == "logit":
            mu = expit(eta)
            return y - mu, mu * (1.0 - mu)
        return (y - eta) / self.dispersion, np.full(eta.shape, 1.0 / self.dispersion)


@dataclass(frozen=True)
class FitResult:
    """Result of :func:`fit_mle`."""

    beta_hat: np.ndarray
    hessian_at_opt: np.ndarray
    converged: bool
    iterations: int
    final_gradient_norm: float
    loglik: float
    separation: bool = False
    dispersion_hat: float | None = None
    n: int = 0
    names: tuple | None = field(default=None, compare=False)


def _prepare(X, y, beta, weights, family):
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float).ravel()
    if X.ndim != 2:
        raise DimensionError("design must be two-dimensional")
    n, p = X.shape
    if y.shape[0] != n:
        raise DimensionError(f"design has {n} rows but response has {y.shape[0]}")
    if weights is None:
        weights = np.ones(n)
    else:
        weights = np.ascontiguousarray(weights, dtype=float).ravel()
        if weights.shape[0] != n:
            raise DimensionError(f"design has {n} rows but weights have {weights.shape[0]}")
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
    if beta is not None:
        beta = np.ascontiguousarray(beta, dtype=float).ravel()
        if beta.shape[0] != p:
            raise DimensionError(f"beta has length {beta.shape[0]}, design width is {p}")
        if not np.all(np.isfinite(beta)):
            raise NonFiniteError("beta has non-finite entries")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y)) and np.all(np.isfinite(weights))):
        raise NonFiniteError("data contain non-finite values")
    if family.kind == "logit" and not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("logit response must be 0/1")
    return X, y, beta, weights


def log_likelihood(X, y, beta, family: Family, weights=None) -> float:
    """Weighted log-likelihood ``sum_i w_i log f(y_i | x_i, beta)``."""
    X, y, beta, weights = _prepare(X, y, beta, weights, family)
    return kernels.glm_loglik(X, y, beta, weights, family.code, family.dispersion)


def score(X, y, beta, family: Family, weights=None) -> np.ndarray:
    """Gradient of :func:`log_likelihood` with respect to ``beta``."""
    X, y, beta, weights = _prepare(X, y, beta, weights, family)
    return kernels.glm_derivatives(X, y, beta, weights, family.code, family.dispersion)[1]


def hessian(X, y, beta, family: Family, weights=None) -> np.ndarray:
    """Analytic second derivative of :func:`log_likelihood`."""
    X, y, beta, weights = _prepare(X, y, beta, weights, family)
    return kernels.glm_derivatives(X, y, beta, weights, family.code, family.dispersion)[2]


def _check_rank(X, weights):
    support = (weights > 0).astype(float)
    gram = kernels.weighted_crossprod(X, X, support)
    if gram.size == 0:
        return
    eig = np.linalg.eigvalsh(gram)
    if eig[-1] <= 0 or eig[0] <= 1e-12 * eig[-1]:
        raise SingularHessianError("design is rank deficient on the weighted support")


def _separation(X, y, beta, weights) -> bool:
    """True when the fitted predictor classifies every row strictly (complete
    separation, so no finite MLE exists) or when ``|x beta|`` exceeds
    ``SEPARATION_ETA`` on every row of one class (quasi-separation)."""
    eta = X @ beta
    support = weights > 0
    pos, neg = support & (y == 1.0), support & (y == 0.0)
    if pos.any() and neg.any() and np.all(eta[pos] > 0) and np.all(eta[neg] < 0):
        return True
    for rows in (pos, neg):
        if rows.any() and np.all(np.abs(eta[rows]) > SEPARATION_ETA):
            return True
    return False


def fit_mle(X, y, family: Family, weights=None, init=None, *, tol=GRADIENT_TOL,
            max_iter=MAX_ITER, max_halvings=MAX_HALVINGS) -> FitResult:
    """Maximize the (weighted) log-likelihood by damped Newton iterations.

    Iterates until the sup-norm of the gradient drops below ``tol`` or
    ``max_iter`` steps are taken. Each step is halved (at most
    ``max_halvings`` times) until the log-likelihood does not decrease.

    Returns
    -------
    FitResult
        ``converged`` is False when the iteration limit is hit or the line
        search stalls; the best iterate is returned in that case. A
        degenerate logit response (all rows in one class) returns
        immediately with ``converged=False`` and ``separation=True``.

    Raises
    ------
    SingularHessianError
        If the design is rank deficient on the rows with positive weight.
    """
    p = np.shape(X)[1]
    X, y, beta, weights = _prepare(X, y, np.zeros(p) if init is None else init, weights, family)
    n_support = int(np.count_nonzero(weights))
    if n_support == 0:
        raise DimensionError("no rows with positive weight")
    _check_rank(X, weights)
    code, disp = family.code, family.dispersion
    derivs = kernels.glm_derivatives
    loglik = kernels.glm_loglik

    ll, g, H = derivs(X, y, beta, weights, code, disp)
    if family.kind == "logit":
        ys = y[weights > 0]
        if np.all(ys == ys[0]):
            warnings.warn("degenerate logit response: all outcomes equal", RuntimeWarning,
                          stacklevel=2)
            return FitResult(beta, sym(H), False, 0, float(np.max(np.abs(g))), ll, True,
                             None, n_support)

    converged = False
    iterations = 0
    while True:
        gnorm = float(np.max(np.abs(g))) if p else 0.0
        if gnorm < tol:
            converged = True
            break
        if iterations >= max_iter:
            break
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError as exc:
            raise SingularHessianError("Hessian is singular during Newton iterations") from exc
        t = 1.0
        accepted = False
        floor = ll - 1e-12 * (1.0 + abs(ll))
        for _ in range(max_halvings + 1):
            cand = beta + t * step
            ll_c = loglik(X, y, cand, weights, code, disp)
            if np.isfinite(ll_c) and ll_c >= floor:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        beta = cand
        iterations += 1
        ll, g, H = derivs(X, y, beta, weights, code, disp)

    sep = family.kind == "logit" and _separation(X, y, beta, weights)
    if sep:
        warnings.warn("possible separation: the fitted predictor splits the classes",
                      RuntimeWarning, stacklevel=2)
    disp_hat = None
    if family.kind == "linear":
        res = y - X @ beta
        disp_hat = float(np.dot(weights, res * res) / weights.sum())
    return FitResult(beta, sym(H), converged, iterations, gnorm, ll, sep, disp_hat, n_support)


def sandwich_parts(X, y, beta, family: Family, weights=None):
    """Per-observation ``A = -mean(w d2 log f)`` and ``B = mean(w^2 g g^T)``.

    The average runs over the rows with positive weight.
    """
    X, y, beta, weights = _prepare(X, y, beta, weights, family)
    n = int(np.count_nonzero(weights))
    if n == 0:
        raise DimensionError("no rows with positive weight")
    r, c = family.row_factors(X, y, beta)
    a = kernels.weighted_crossprod(X, X, np.ascontiguousarray(weights * c)) / n
    wr = weights * r
    b = kernels.weighted_crossprod(X, X, np.ascontiguousarray(wr * wr)) / n
    return sym(a), sym(b), n


def robust_variance(X, y, beta, family: Family, weights=None) -> np.ndarray:
    """Sandwich variance ``A^{-1} B A^{-1}`` on the per-observation scale.

    The standard error of ``beta_j`` is ``sqrt(V[j, j] / n)``.

    Raises
    ------
    SingularHessianError
        If ``A`` is singular.
    """
    a, b, _ = sandwich_parts(X, y, beta, family, weights)
    return sandwich(a, b, "A_beta")
