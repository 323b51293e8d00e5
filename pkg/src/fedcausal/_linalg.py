"""Small dense linear-algebra helpers shared by the estimators."""
import numpy as np

from fedcausal.errors import NotPositiveSemidefiniteError, SingularHessianError

_COND_LIMIT = 1e14


def sym(m):
    """Symmetric part of a square matrix."""
    return 0.5 * (m + m.T)


def inv(a, what="matrix"):
    """Inverse of a square matrix, raising on (numerical) singularity."""
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return a.copy()
    if not np.all(np.isfinite(a)):
        raise SingularHessianError(f"{what} has non-finite entries")
    try:
        cond = np.linalg.cond(a)
        if not np.isfinite(cond) or cond > _COND_LIMIT:
            raise SingularHessianError(f"{what} is singular (condition number {cond:.3g})")
        return np.linalg.inv(a)
    except np.linalg.LinAlgError as exc:
        raise SingularHessianError(f"{what} is singular") from exc


def sandwich(a, b, what="A"):
    """Return ``a^{-1} b a^{-1}`` symmetrized."""
    ai = inv(a, what)
    return sym(ai @ b @ ai.T)


def check_psd(v, tol=1e-6, what="variance"):
    """Raise if ``v`` has an eigenvalue below ``-tol * max(1, |v|)``."""
    if v.size == 0:
        return v
    eig = np.linalg.eigvalsh(sym(v))
    scale = max(1.0, float(np.max(np.abs(eig))))
    if eig[0] < -tol * scale:
        raise NotPositiveSemidefiniteError(
            f"{what} is not positive semidefinite (min eigenvalue {eig[0]:.3g})"
        )
    return v
