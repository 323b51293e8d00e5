"""Backend selection for the per-row GLM kernels.

The compiled extension is used when it imports. Setting the environment
variable ``FEDCAUSAL_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

BACKEND = "python"

if os.environ.get("FEDCAUSAL_PURE_PYTHON", "") != "1":
    try:
        from fedcausal._kernels import glm_derivatives, glm_loglik, weighted_crossprod

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        pass

if BACKEND == "python":
    from fedcausal._kernels_py import glm_derivatives, glm_loglik, weighted_crossprod

LOGIT = 0
GAUSSIAN = 1

__all__ = [
    "BACKEND",
    "GAUSSIAN",
    "LOGIT",
    "glm_derivatives",
    "glm_loglik",
    "weighted_crossprod",
]
