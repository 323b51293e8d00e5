"""Aggregation schemes and zero-padded global layouts.

A :class:`GlobalLayout` orders coefficients as the shared block followed by
each site's own (unstable) block in sorted site order. Site-local objects
are scattered into that order with zeros elsewhere.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from fedcausal._linalg import inv, sym
from fedcausal.errors import DimensionError, LayoutError, SingularHessianError


class Scheme(str, enum.Enum):
    HESSIAN = "hessian"
    SAMPLE_SIZE = "sample_size"
    INVERSE_VARIANCE = "inverse_variance"


class Mode(str, enum.Enum):
    RESTRICTED = "restricted"
    UNRESTRICTED = "unrestricted"

    @classmethod
    def parse(cls, value) -> "Mode":
        return value if isinstance(value, cls) else cls(str(value).lower())


@dataclass(frozen=True)
class GlobalLayout:
    """Shared block plus per-site unstable blocks.

    Parameters
    ----------
    shared_names : tuple of str
    unstable : tuple of (site_id, tuple of str)
        Sorted by site id. Use :meth:`build` to construct from a mapping.
    """

    shared_names: tuple
    unstable: tuple = ()

    def __post_init__(self):
        shared = tuple(str(s) for s in self.shared_names)
        if len(set(shared)) != len(shared):
            raise LayoutError("duplicate shared names")
        blocks = []
        seen_sites = set()
        for site, names in sorted(((str(s), tuple(str(x) for x in ns)) for s, ns in self.unstable)):
            if site in seen_sites:
                raise LayoutError(f"site {site!r} listed twice")
            seen_sites.add(site)
            if len(set(names)) != len(names):
                raise LayoutError(f"duplicate names in unstable block of {site!r}")
            overlap = set(names) & set(shared)
            if overlap:
                raise LayoutError(f"{sorted(overlap)} are both shared and unstable at {site!r}")
            if names:
                blocks.append((site, names))
        object.__setattr__(self, "shared_names", shared)
        object.__setattr__(self, "unstable", tuple(blocks))
        offsets = {}
        pos = len(shared)
        for site, names in blocks:
            offsets[site] = pos
            pos += len(names)
        object.__setattr__(self, "_offsets", offsets)
        object.__setattr__(self, "_total", pos)

    @classmethod
    def build(cls, shared_names: Sequence[str],
              unstable: Mapping[str, Sequence[str]] | None = None) -> "GlobalLayout":
        items = tuple((k, tuple(v)) for k, v in (unstable or {}).items())
        return cls(tuple(shared_names), items)

    @property
    def total_dim(self) -> int:
        return self._total

    @property
    def is_restricted(self) -> bool:
        return not self.unstable

    @property
    def unstable_map(self) -> dict:
        return dict(self.unstable)

    @property
    def names(self) -> tuple:
        """Global coefficient labels; unstable names are tagged ``name[site]``."""
        out = list(self.shared_names)
        for site, names in self.unstable:
            out.extend(f"{n}[{site}]" for n in names)
        return tuple(out)

    def site_names(self, site_id: str) -> tuple:
        """Default local names at a site: shared then its own block."""
        return self.shared_names + self.unstable_map.get(str(site_id), ())

    def index(self, site_id: str, name: str) -> int:
        site_id = str(site_id)
        own = self.unstable_map.get(site_id, ())
        if name in own:
            return self._offsets[site_id] + own.index(name)
        if name in self.shared_names:
            return self.shared_names.index(name)
        for other, names in self.unstable:
            if name in names:
                raise LayoutError(f"{name!r} is claimed by the unstable block of site {other!r}")
        raise LayoutError(f"unknown covariate name {name!r}")

    def indices(self, site_id: str, local_names: Sequence[str]) -> np.ndarray:
        idx = np.array([self.index(site_id, n) for n in local_names], dtype=int)
        if len(set(idx.tolist())) != len(idx):
            raise LayoutError("duplicate local names")
        return idx

    def to_dict(self) -> dict:
        return {"shared": list(self.shared_names),
                "unstable": {s: list(ns) for s, ns in self.unstable}}

    @classmethod
    def from_dict(cls, d) -> "GlobalLayout":
        return cls.build(d["shared"], d.get("unstable") or {})


def pad_vector(local, idx, dim) -> np.ndarray:
    out = np.zeros(dim)
    out[idx] = np.asarray(local, dtype=float)
    return out


def pad_matrix(local, row_idx, col_idx, shape) -> np.ndarray:
    local = np.asarray(local, dtype=float)
    if local.shape != (len(row_idx), len(col_idx)):
        raise DimensionError(f"matrix shape {local.shape} does not match local names")
    out = np.zeros(shape)
    out[np.ix_(row_idx, col_idx)] = local
    return out


def zero_pad(local_vector, local_matrix, site_id, layout: GlobalLayout,
             local_names: Sequence[str] | None = None):
    """Scatter a site's vector and square matrix into the global layout."""
    names = layout.site_names(site_id) if local_names is None else tuple(local_names)
    idx = layout.indices(site_id, names)
    dim = layout.total_dim
    vec = None if local_vector is None else pad_vector(local_vector, idx, dim)
    if vec is not None and np.shape(local_vector) != (len(idx),):
        raise DimensionError("vector length does not match local names")
    mat = None if local_matrix is None else pad_matrix(local_matrix, idx, idx, (dim, dim))
    return vec, mat


def gather(global_vector, site_id, layout: GlobalLayout,
           local_names: Sequence[str] | None = None) -> np.ndarray:
    """Extract a site's local coefficients from a global vector."""
    names = layout.site_names(site_id) if local_names is None else tuple(local_names)
    return np.asarray(global_vector, dtype=float)[layout.indices(site_id, names)]


def hessian_weighting(points: Sequence[np.ndarray], hessians: Sequence[np.ndarray],
                      occupied=None) -> np.ndarray:
    """``(sum H_k)^{-1} sum H_k b_k`` on the occupied coordinates.

    Coordinates outside ``occupied`` are NaN. By default every coordinate
    with a nonzero row in some Hessian is occupied.
    """
    if not points:
        raise DimensionError("no estimates to combine")
    dim = len(points[0])
    h_sum = np.zeros((dim, dim))
    rhs = np.zeros(dim)
    for b, h in zip(points, hessians):
        h = np.asarray(h, dtype=float)
        h_sum += h
        rhs += h @ np.asarray(b, dtype=float)
    if occupied is None:
        occupied = np.flatnonzero(
            np.any([np.any(np.asarray(h) != 0.0, axis=1) for h in hessians], axis=0))
    occupied = np.asarray(occupied, dtype=int)
    out = np.full(dim, np.nan)
    sub = h_sum[np.ix_(occupied, occupied)]
    if sub.size and not np.linalg.cond(sub) < 1e14:
        raise SingularHessianError("aggregate Hessian is singular on the occupied block")
    out[occupied] = np.linalg.solve(sub, rhs[occupied]) if sub.size else []
    return out


def sample_size_weighting(ns: Sequence[int], values: Sequence):
    """``sum (n_k / n_pool) M_k`` for scalars or arrays."""
    if len(ns) != len(values) or not ns:
        raise DimensionError("need one value per sample size")
    total = float(sum(ns))
    shape = np.shape(values[0])
    acc = np.zeros(shape)
    for n, v in zip(ns, values):
        if np.shape(v) != shape:
            raise DimensionError("values have different shapes")
        acc = acc + (n / total) * np.asarray(v, dtype=float)
    return float(acc) if acc.ndim == 0 else acc


def inverse_variance_weighting(points: Sequence, variances: Sequence, n_pool: float = 1.0):
    """Inverse-variance weighted combination.

    Parameters
    ----------
    points : sequence of vectors (or scalars)
    variances : sequence of matrices (or scalars)
        Unscaled sampling variances of each point.
    n_pool : float
        Multiplier for the returned variance, so that with the pooled
        sample size it is on the per-observation scale.

    Returns
    -------
    point, var_scaled
        ``(sum V_k^{-1})^{-1} sum V_k^{-1} b_k`` and ``n_pool (sum V_k^{-1})^{-1}``.
    """
    if not points or len(points) != len(variances):
        raise DimensionError("need one variance per point")
    scalar = np.ndim(points[0]) == 0
    pts = [np.atleast_1d(np.asarray(p, dtype=float)) for p in points]
    dim = pts[0].shape[0]
    prec_sum = np.zeros((dim, dim))
    rhs = np.zeros(dim)
    for b, v in zip(pts, variances):
        v = np.atleast_2d(np.asarray(v, dtype=float))
        if v.shape != (dim, dim) or b.shape != (dim,):
            raise DimensionError("inconsistent dimensions")
        prec = inv(v, "variance")
        prec_sum += prec
        rhs += prec @ b
    cov = sym(inv(prec_sum, "summed precision"))
    point = cov @ rhs
    var = n_pool * cov
    if scalar:
        return float(point[0]), float(var[0, 0])
    return point, var
