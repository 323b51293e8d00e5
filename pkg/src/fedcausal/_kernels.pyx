"""Compiled per-row GLM kernels.

Same signatures and semantics as ``fedcausal._kernels_py``. Family codes:
0 is logit, 1 is gaussian with identity link.
"""
import numpy as np

from libc.math cimport exp, log, log1p, M_PI


cdef inline double _softplus(double t) noexcept nogil:
    if t > 0:
        return t + log1p(exp(-t))
    return log1p(exp(t))


cdef inline double _expit(double t) noexcept nogil:
    cdef double q
    if t >= 0:
        return 1.0 / (1.0 + exp(-t))
    q = exp(t)
    return q / (1.0 + q)


def glm_loglik(const double[:, ::1] X, const double[::1] y,
               const double[::1] beta, const double[::1] weights,
               int family, double dispersion):
    """Weighted log-likelihood sum."""
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1], i, j
    cdef double ll = 0.0, eta, res
    cdef double lognorm = -0.5 * log(2.0 * M_PI * dispersion)
    with nogil:
        for i in range(n):
            if weights[i] == 0.0:
                continue
            eta = 0.0
            for j in range(p):
                eta += X[i, j] * beta[j]
            if family == 0:
                ll += weights[i] * (y[i] * eta - _softplus(eta))
            else:
                res = y[i] - eta
                ll += weights[i] * (lognorm - 0.5 * res * res / dispersion)
    return ll


def glm_derivatives(const double[:, ::1] X, const double[::1] y,
                    const double[::1] beta, const double[::1] weights,
                    int family, double dispersion):
    """Weighted log-likelihood, score and Hessian in one pass."""
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1], i, j, k
    cdef double ll = 0.0, eta, res, mu, r, c, wi, xij
    cdef double lognorm = -0.5 * log(2.0 * M_PI * dispersion)
    grad_arr = np.zeros(p)
    hess_arr = np.zeros((p, p))
    cdef double[::1] grad = grad_arr
    cdef double[:, ::1] hess = hess_arr
    with nogil:
        for i in range(n):
            wi = weights[i]
            if wi == 0.0:
                continue
            eta = 0.0
            for j in range(p):
                eta += X[i, j] * beta[j]
            if family == 0:
                mu = _expit(eta)
                ll += wi * (y[i] * eta - _softplus(eta))
                r = y[i] - mu
                c = mu * (1.0 - mu)
            else:
                res = y[i] - eta
                ll += wi * (lognorm - 0.5 * res * res / dispersion)
                r = res / dispersion
                c = 1.0 / dispersion
            r *= wi
            c *= wi
            for j in range(p):
                xij = X[i, j]
                grad[j] += r * xij
                for k in range(j + 1):
                    hess[j, k] -= c * xij * X[i, k]
        for j in range(p):
            for k in range(j):
                hess[k, j] = hess[j, k]
    return ll, grad_arr, hess_arr


def weighted_crossprod(const double[:, ::1] X, const double[:, ::1] Z,
                       const double[::1] c):
    """Return sum_i c_i x_i z_i^T."""
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1], q = Z.shape[1], i, j, k
    cdef double ci, a
    out_arr = np.zeros((p, q))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            ci = c[i]
            if ci == 0.0:
                continue
            for j in range(p):
                a = ci * X[i, j]
                for k in range(q):
                    out[j, k] += a * Z[i, k]
    return out_arr
