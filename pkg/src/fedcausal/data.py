"""Per-site datasets and design-matrix construction.

Outcome designs always use the column order ``(intercept, treatment,
covariates...)`` so the treatment coefficient sits at index 1. Propensity
designs use ``(intercept, covariates...)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fedcausal.errors import DimensionError, NonFiniteError

INTERCEPT = "intercept"


@dataclass(frozen=True, eq=False)
class Dataset:
    """Rows of (covariates X, binary treatment W, outcome Y) for one site.

    Parameters
    ----------
    x : ndarray, shape (n, d)
        Covariates, without an intercept column.
    w : ndarray, shape (n,)
        Treatment indicator in {0, 1}.
    y : ndarray, shape (n,)
        Outcome.
    covariate_names : sequence of str
        Column names of ``x``.
    treatment_name : str
        Name used for the treatment coefficient.
    site_id : str, optional
    """

    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    covariate_names: tuple
    treatment_name: str = "w"
    site_id: str | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        w = np.asarray(self.w, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        names = tuple(str(c) for c in self.covariate_names)
        if x.size == 0 and not names:
            x = np.empty((w.shape[0], 0))
        elif x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.shape[0] != w.shape[0] or y.shape[0] != w.shape[0]:
            raise DimensionError(
                f"row counts differ: x {x.shape[0]}, w {w.shape[0]}, y {y.shape[0]}"
            )
        if x.shape[1] != len(names):
            raise DimensionError(f"{x.shape[1]} covariate columns but {len(names)} names")
        if len(set(names)) != len(names):
            raise DimensionError("duplicate covariate names")
        if INTERCEPT in names or self.treatment_name in names:
            raise DimensionError("covariate names may not reuse the intercept or treatment name")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(w)) and np.all(np.isfinite(y))):
            raise NonFiniteError("dataset contains non-finite values")
        if not np.all((w == 0.0) | (w == 1.0)):
            raise DimensionError("treatment must be coded 0/1")
        for arr in (x, w, y):
            arr.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @property
    def n_treated(self) -> int:
        return int(self.w.sum())

    def column(self, name: str) -> np.ndarray:
        if name == INTERCEPT:
            return np.ones(self.n)
        if name == self.treatment_name:
            return self.w
        try:
            return self.x[:, self.covariate_names.index(name)]
        except ValueError:
            raise DimensionError(f"unknown column {name!r}") from None

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.w[idx], self.y[idx], self.covariate_names,
                       self.treatment_name, self.site_id)

    def with_site_id(self, site_id: str) -> "Dataset":
        return Dataset(self.x, self.w, self.y, self.covariate_names, self.treatment_name, site_id)

    @staticmethod
    def concat(parts: Sequence["Dataset"], site_id: str | None = None) -> "Dataset":
        if not parts:
            raise DimensionError("nothing to concatenate")
        names = parts[0].covariate_names
        for p in parts[1:]:
            if p.covariate_names != names:
                raise DimensionError("covariate names differ between datasets")
        return Dataset(
            np.vstack([p.x for p in parts]),
            np.concatenate([p.w for p in parts]),
            np.concatenate([p.y for p in parts]),
            names,
            parts[0].treatment_name,
            site_id,
        )


def outcome_names(data: Dataset, covariates: Sequence[str] | None = None) -> tuple:
    """Coefficient names of the outcome design."""
    covs = data.covariate_names if covariates is None else tuple(covariates)
    return (INTERCEPT, data.treatment_name) + tuple(covs)


def propensity_names(data: Dataset, covariates: Sequence[str] | None = None) -> tuple:
    """Coefficient names of the propensity design."""
    covs = data.covariate_names if covariates is None else tuple(covariates)
    return (INTERCEPT,) + tuple(covs)


def design_from_names(data: Dataset, names: Sequence[str], treatment_value=None) -> np.ndarray:
    """Build a C-contiguous design matrix whose columns follow ``names``.

    If ``treatment_value`` is given the treatment column is set to that
    constant, which gives the counterfactual designs used for mu_1 and mu_0.
    """
    cols = []
    for name in names:
        if treatment_value is not None and name == data.treatment_name:
            cols.append(np.full(data.n, float(treatment_value)))
        else:
            cols.append(data.column(name))
    if not cols:
        return np.empty((data.n, 0))
    return np.ascontiguousarray(np.column_stack(cols), dtype=float)


def outcome_design(data: Dataset, covariates: Sequence[str] | None = None):
    """Return ``(X, names)`` for the outcome model."""
    names = outcome_names(data, covariates)
    return design_from_names(data, names), names


def propensity_design(data: Dataset, covariates: Sequence[str] | None = None):
    """Return ``(Z, names)`` for the propensity model."""
    names = propensity_names(data, covariates)
    return design_from_names(data, names), names
