"""Pure numpy kernels, used when the compiled extension is unavailable.

Family codes: 0 is logit, 1 is gaussian with identity link.
"""
import numpy as np
from scipy.special import expit


def glm_loglik(X, y, beta, weights, family, dispersion):
    """Weighted log-likelihood sum."""
    eta = X @ beta
    if family == 0:
        ll = y * eta - np.logaddexp(0.0, eta)
    else:
        res = y - eta
        ll = -0.5 * np.log(2.0 * np.pi * dispersion) - 0.5 * res * res / dispersion
    return float(np.dot(weights, ll))


def glm_derivatives(X, y, beta, weights, family, dispersion):
    """Weighted log-likelihood, score and Hessian in one pass."""
    eta = X @ beta
    if family == 0:
        mu = expit(eta)
        ll = y * eta - np.logaddexp(0.0, eta)
        r = y - mu
        c = mu * (1.0 - mu)
    else:
        res = y - eta
        ll = -0.5 * np.log(2.0 * np.pi * dispersion) - 0.5 * res * res / dispersion
        r = res / dispersion
        c = np.full_like(eta, 1.0 / dispersion)
    grad = X.T @ (weights * r)
    hess = -(X.T * (weights * c)) @ X
    return float(np.dot(weights, ll)), grad, 0.5 * (hess + hess.T)


def weighted_crossprod(X, Z, c):
    """Return sum_i c_i x_i z_i^T."""
    return (X.T * c) @ Z
