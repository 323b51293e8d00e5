"""Federated MLE, IPW-MLE and AIPW built from per-site summaries.

Site-level functions (``site_*``) see one site's rows and return objects
that carry only summary statistics. Coordinator functions (``combine_*``)
see only those summaries. The composed estimators run both halves in
process; :mod:`fedcausal.protocol` runs the same halves as message rounds.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from fedcausal._linalg import check_psd, sandwich
from fedcausal.aipw import AipwResult, NuisanceModels, Provenance, estimate_aipw, glm_nuisances
from fedcausal.data import INTERCEPT, Dataset, design_from_names
from fedcausal.errors import (
    DimensionError,
    LayoutError,
    NonConvergenceError,
    ProvenanceError,
)
from fedcausal.glm import Family, fit_mle, sandwich_parts
from fedcausal.ipw_mle import (
    MatrixBundle,
    average_bundles,
    bundle_from_arrays,
    ipw_mle_variance,
)
from fedcausal.propensity import Estimand, ipw_weights, propensity_scores
from fedcausal.weighting import (
    GlobalLayout,
    Mode,
    Scheme,
    gather,
    hessian_weighting,
    inverse_variance_weighting,
    pad_matrix,
    pad_vector,
    sample_size_weighting,
)


class PropensityMode(str, enum.Enum):
    KNOWN_STABLE = "known"
    ESTIMATED_STABLE = "estimated"
    UNSTABLE = "unstable"


@dataclass(frozen=True)
class SiteSummary:
    """Everything a site ships for one parameter space, padded globally.

    ``kind`` is ``"mle"`` (plain likelihood; ``space`` tells whether the
    coefficients are outcome ``beta`` or propensity ``gamma``) or
    ``"ipw-mle"`` (weighted outcome likelihood with the full bundle).
    """

    site_id: str
    n: int
    kind: str
    space: str
    names: tuple
    beta_pad: np.ndarray
    hessian_pad: np.ndarray
    bundle_pad: MatrixBundle
    gamma_names: tuple = ()
    propensity_known: bool = False
    converged: bool = True


@dataclass(frozen=True)
class AipwSummary:
    """A site's AIPW estimate; ``var_scaled`` is per observation."""

    site_id: str
    n: int
    tau_hat: float
    var_scaled: float
    estimand: Estimand
    provenance: Provenance


@dataclass(frozen=True)
class FederatedEstimate:
    """Federated point estimate with per-observation variance.

    Standard errors are ``sqrt(var_scaled / n_pool)``. For vector estimates
    coordinates no site contributed to are NaN.
    """

    point: np.ndarray | float
    var_scaled: np.ndarray | float
    n_pool: int
    scheme: Scheme
    mode: Mode
    names: tuple | None = None
    estimator: str = ""
    estimand: Estimand | None = None
    extras: dict = field(default_factory=dict, compare=False)

    @property
    def se(self):
        if np.ndim(self.var_scaled) == 0:
            return float(np.sqrt(self.var_scaled / self.n_pool))
        return np.sqrt(np.diag(self.var_scaled) / self.n_pool)

    def _pos(self, name):
        if self.names is None:
            raise KeyError("estimate has no coefficient names")
        return self.names.index(name)

    def coef(self, name: str) -> float:
        return float(self.point[self._pos(name)])

    def coef_se(self, name: str) -> float:
        return float(self.se[self._pos(name)])

    def coef_var(self, name: str) -> float:
        i = self._pos(name)
        return float(self.var_scaled[i, i])

    def ci95(self):
        half = 1.96 * np.asarray(self.se)
        return np.asarray(self.point) - half, np.asarray(self.point) + half


# ---------------------------------------------------------------- helpers


def as_sites(sites) -> list[tuple[str, Dataset]]:
    """Normalize site handles to ``[(site_id, Dataset)]`` sorted by id."""
    if isinstance(sites, Mapping):
        items = [(str(k), v) for k, v in sites.items()]
    elif isinstance(sites, Dataset):
        items = [(sites.site_id or "site0", sites)]
    else:
        items = []
        for i, d in enumerate(sites):
            if isinstance(d, tuple):
                items.append((str(d[0]), d[1]))
            else:
                items.append((d.site_id if d.site_id is not None else f"site{i}", d))
    if not items:
        raise DimensionError("need at least one site")
    ids = [s for s, _ in items]
    if len(set(ids)) != len(ids):
        raise LayoutError("duplicate site ids")
    return sorted(items, key=lambda t: t[0])


def canonical(summaries):
    """Sort summaries by site id and reject duplicates."""
    out = sorted(summaries, key=lambda s: s.site_id)
    if not out:
        raise DimensionError("no summaries to combine")
    ids = [s.site_id for s in out]
    if len(set(ids)) != len(ids):
        raise LayoutError("duplicate site ids among summaries")
    return out


def _occupied(layout: GlobalLayout, pairs) -> np.ndarray:
    idx = set()
    for site_id, names in pairs:
        idx.update(layout.indices(site_id, names).tolist())
    return np.array(sorted(idx), dtype=int)


def _embed(sub, occ, dim):
    full = np.full((dim, dim), np.nan)
    full[np.ix_(occ, occ)] = sub
    return full


def _require_converged(fit, what, site_id):
    if not fit.converged:
        raise NonConvergenceError(f"{what} did not converge at site {site_id!r}", fit)
    if getattr(fit, "separation", False):
        raise NonConvergenceError(f"{what} is separated at site {site_id!r}", fit)
    return fit


def _check_mode(mode, *layouts):
    mode = Mode.parse(mode)
    if mode is Mode.RESTRICTED and not all(lay.is_restricted for lay in layouts):
        raise LayoutError("restricted mode requires layouts without unstable blocks")
    return mode


# ---------------------------------------------------------------- site side


def site_mle_summary(data: Dataset, site_id: str, layout: GlobalLayout, family: Family,
                     *, space: str = "beta") -> SiteSummary:
    """Fit a site's outcome (``space="beta"``) or propensity (``"gamma"``)
    model and pad the estimate, Hessian and sandwich matrices."""
    names = layout.site_names(site_id)
    X = design_from_names(data, names)
    if space == "beta":
        resp = data.y
    elif space == "gamma":
        resp, family = data.w, Family.logit()
    else:
        raise ValueError("space must be 'beta' or 'gamma'")
    fit = _require_converged(fit_mle(X, resp, family), f"{space} model", site_id)
    a, b, _ = sandwich_parts(X, resp, fit.beta_hat, family)
    idx = layout.indices(site_id, names)
    dim = layout.total_dim
    shape = (dim, dim)
    bundle = MatrixBundle(pad_matrix(a, idx, idx, shape), pad_matrix(b, idx, idx, shape), data.n)
    return SiteSummary(str(site_id), data.n, "mle", space, names,
                       pad_vector(fit.beta_hat, idx, dim),
                       pad_matrix(fit.hessian_at_opt, idx, idx, shape), bundle)


def site_ipw_summary(data: Dataset, site_id: str, layout_beta: GlobalLayout,
                     layout_gamma: GlobalLayout, gamma_global, family: Family, estimand,
                     *, propensity_known: bool = False, residuals: str = "score") -> SiteSummary:
    """Fit a site's IPW-MLE with the given (federated or true) propensity
    coefficients and pad the estimate, Hessian and matrix bundle."""
    estimand = Estimand.parse(estimand)
    bnames = layout_beta.site_names(site_id)
    gnames = layout_gamma.site_names(site_id)
    gamma_local = gather(gamma_global, site_id, layout_gamma, gnames)
    X = design_from_names(data, bnames)
    Z = design_from_names(data, gnames)
    varpi = ipw_weights(propensity_scores(Z, gamma_local), data.w, estimand)
    fit = _require_converged(fit_mle(X, data.y, family, weights=varpi), "IPW-MLE", site_id)
    bundle = bundle_from_arrays(X, data.y, fit.beta_hat, Z, data.w, gamma_local, family,
                                estimand, residuals=residuals)
    bi = layout_beta.indices(site_id, bnames)
    gi = layout_gamma.indices(site_id, gnames)
    pb, pg = layout_beta.total_dim, layout_gamma.total_dim

    def pad(name, m):
        if name in ("A_gamma", "B_gamma"):
            return pad_matrix(m, gi, gi, (pg, pg))
        if name in ("C", "C1", "C2"):
            return pad_matrix(m, bi, gi, (pb, pg))
        return pad_matrix(m, bi, bi, (pb, pb))

    return SiteSummary(str(site_id), data.n, "ipw-mle", "beta", bnames,
                       pad_vector(fit.beta_hat, bi, pb),
                       pad_matrix(fit.hessian_at_opt, bi, bi, (pb, pb)),
                       bundle.map(pad), gnames, bool(propensity_known))


def federated_nuisances(beta_global, gamma_global, site_id: str, layout_beta: GlobalLayout,
                        layout_gamma: GlobalLayout, family: Family) -> NuisanceModels:
    """Nuisance evaluators for one site from federated coefficients."""
    bnames = layout_beta.site_names(site_id)
    gnames = layout_gamma.site_names(site_id)
    return glm_nuisances(gather(beta_global, site_id, layout_beta, bnames), bnames, family,
                         gather(gamma_global, site_id, layout_gamma, gnames), gnames,
                         Provenance.POOLED_FEDERATED)


def site_local_nuisances(data: Dataset, site_id: str, layout_beta: GlobalLayout,
                         layout_gamma: GlobalLayout, family: Family,
                         known_gamma=None) -> NuisanceModels:
    """Nuisance models fitted on one site's rows only."""
    bnames = layout_beta.site_names(site_id)
    gnames = layout_gamma.site_names(site_id)
    X = design_from_names(data, bnames)
    beta = _require_converged(fit_mle(X, data.y, family), "outcome model", site_id).beta_hat
    if known_gamma is None:
        Z = design_from_names(data, gnames)
        gamma = _require_converged(fit_mle(Z, data.w, Family.logit()), "propensity model",
                                   site_id).beta_hat
    else:
        gamma = gather(known_gamma, site_id, layout_gamma, gnames)
    return glm_nuisances(beta, bnames, family, gamma, gnames, Provenance.SITE_LOCAL)


def site_aipw_summary(data: Dataset, site_id: str, nuisances: NuisanceModels,
                      estimand) -> AipwSummary:
    res: AipwResult = estimate_aipw(data, nuisances, estimand)
    return AipwSummary(str(site_id), res.n, res.tau_hat, res.var_scaled, res.estimand,
                       nuisances.provenance)


# ---------------------------------------------------------------- coordinator side


def federated_mle(summaries: Sequence[SiteSummary], layout: GlobalLayout,
                  mode=Mode.RESTRICTED) -> FederatedEstimate:
    """Hessian-weighted point and sample-size weighted sandwich variance."""
    mode = _check_mode(mode, layout)
    s = canonical(summaries)
    if any(x.kind != "mle" for x in s) or len({x.space for x in s}) != 1:
        raise DimensionError("federated_mle needs plain MLE summaries of one space")
    occ = _occupied(layout, [(x.site_id, x.names) for x in s])
    point = hessian_weighting([x.beta_pad for x in s], [x.hessian_pad for x in s], occ)
    bundle = average_bundles([x.bundle_pad for x in s])
    sub = np.ix_(occ, occ)
    v = check_psd(sandwich(bundle.A_beta_varpi[sub], bundle.D_beta_varpi[sub], "A_beta"))
    return FederatedEstimate(point, _embed(v, occ, layout.total_dim), bundle.n,
                             Scheme.HESSIAN, mode, layout.names, "mle",
                             extras={"space": s[0].space})


def federated_ipw_combine(summaries: Sequence[SiteSummary], layout_beta: GlobalLayout,
                          layout_gamma: GlobalLayout, mode=Mode.RESTRICTED) -> FederatedEstimate:
    """Hessian-weighted IPW-MLE point; variance from the sample-size
    weighted bundle, corrected for propensity estimation when it was
    estimated."""
    mode = _check_mode(mode, layout_beta, layout_gamma)
    s = canonical(summaries)
    if any(x.kind != "ipw-mle" for x in s):
        raise DimensionError("federated_ipw_combine needs IPW-MLE summaries")
    known = {x.propensity_known for x in s}
    if len(known) != 1:
        raise DimensionError("sites disagree on whether the propensity is known")
    ob = _occupied(layout_beta, [(x.site_id, x.names) for x in s])
    og = _occupied(layout_gamma, [(x.site_id, x.gamma_names) for x in s])
    point = hessian_weighting([x.beta_pad for x in s], [x.hessian_pad for x in s], ob)
    bundle = average_bundles([x.bundle_pad for x in s])

    def restrict(name, m):
        rows = og if name in ("A_gamma", "B_gamma") else ob
        cols = ob if name in ("A_beta_varpi", "D_beta_varpi") else og
        return m[np.ix_(rows, cols)]

    v = ipw_mle_variance(bundle.map(restrict), known.pop())
    return FederatedEstimate(point, _embed(v, ob, layout_beta.total_dim), bundle.n,
                             Scheme.HESSIAN, mode, layout_beta.names, "ipw-mle",
                             bundle.estimand)


def federated_aipw_combine(summaries: Sequence[AipwSummary], mode) -> FederatedEstimate:
    """Restricted: inverse-variance weighting. Unrestricted: sample-size
    weighting of both the effects and the per-observation variances."""
    mode = Mode.parse(mode)
    s = canonical(summaries)
    estimands = {x.estimand for x in s}
    if len(estimands) != 1:
        raise DimensionError("sites disagree on the estimand")
    n_pool = sum(x.n for x in s)
    if mode is Mode.RESTRICTED:
        bad = [x.site_id for x in s if x.provenance is not Provenance.POOLED_FEDERATED]
        if bad:
            raise ProvenanceError(f"restricted AIPW needs federated nuisances; sites {bad} are not")
        tau, var = inverse_variance_weighting([x.tau_hat for x in s],
                                              [x.var_scaled / x.n for x in s], n_pool)
        scheme = Scheme.INVERSE_VARIANCE
    else:
        ns = [x.n for x in s]
        tau = sample_size_weighting(ns, [x.tau_hat for x in s])
        var = sample_size_weighting(ns, [x.var_scaled for x in s])
        scheme = Scheme.SAMPLE_SIZE
    return FederatedEstimate(float(tau), float(var), n_pool, scheme, mode, None, "aipw",
                             estimands.pop())


# ---------------------------------------------------------------- composed


def default_layout(data: Dataset, covariates: Sequence[str] | None = None,
                   space: str = "beta") -> GlobalLayout:
    """Fully shared layout for the outcome (``beta``) or propensity model."""
    covs = tuple(data.covariate_names if covariates is None else covariates)
    if space == "beta":
        return GlobalLayout((INTERCEPT, data.treatment_name) + covs)
    return GlobalLayout((INTERCEPT,) + covs)


def federated_mle_from_data(sites, layout: GlobalLayout, family: Family,
                            mode=Mode.RESTRICTED, *, space: str = "beta") -> FederatedEstimate:
    """Fit every site and federate (outcome or propensity model)."""
    items = as_sites(sites)
    summaries = [site_mle_summary(d, sid, layout, family, space=space) for sid, d in items]
    return federated_mle(summaries, layout, mode)


def _resolve_gamma(items, layout_gamma, propensity_mode, known_gamma):
    pm = PropensityMode(propensity_mode)
    if pm is PropensityMode.KNOWN_STABLE:
        if known_gamma is None:
            raise ValueError("known propensity mode needs known_gamma")
        if not layout_gamma.is_restricted:
            raise LayoutError("a known stable propensity needs a restricted propensity layout")
        gamma = np.asarray(known_gamma, dtype=float)
        if gamma.shape != (layout_gamma.total_dim,):
            raise DimensionError("known_gamma does not match the propensity layout")
        return gamma, True, None
    if pm is PropensityMode.ESTIMATED_STABLE and not layout_gamma.is_restricted:
        raise LayoutError("a stable estimated propensity needs a restricted propensity layout")
    mode = Mode.RESTRICTED if layout_gamma.is_restricted else Mode.UNRESTRICTED
    prop = federated_mle_from_data(items, layout_gamma, Family.logit(), mode, space="gamma")
    return prop.point, False, prop


def federated_ipw_mle(sites, layout_beta: GlobalLayout, layout_gamma: GlobalLayout, estimand,
                      propensity_mode=PropensityMode.ESTIMATED_STABLE, *,
                      family: Family | None = None, known_gamma=None, mode=None,
                      residuals: str = "score") -> FederatedEstimate:
    """Federated IPW-MLE.

    Round 1 (skipped for a known propensity) federates the propensity model
    by Hessian weighting. Round 2 fits each site's IPW-MLE with those
    coefficients. Round 3 Hessian-weights the outcome coefficients and
    combines the bundles by sample size.
    """
    family = Family.logit() if family is None else family
    items = as_sites(sites)
    if mode is None:
        mode = Mode.RESTRICTED if (layout_beta.is_restricted and layout_gamma.is_restricted) \
            else Mode.UNRESTRICTED
    mode = _check_mode(mode, layout_beta, layout_gamma)
    gamma, known, prop = _resolve_gamma(items, layout_gamma, propensity_mode, known_gamma)
    summaries = [site_ipw_summary(d, sid, layout_beta, layout_gamma, gamma, family, estimand,
                                  propensity_known=known, residuals=residuals)
                 for sid, d in items]
    est = federated_ipw_combine(summaries, layout_beta, layout_gamma, mode)
    return replace(est, extras={"gamma": gamma, "propensity": prop})


def federated_aipw(sites, mode=Mode.RESTRICTED, estimand=Estimand.ATE, *,
                   layout_beta: GlobalLayout | None = None,
                   layout_gamma: GlobalLayout | None = None,
                   family: Family | None = None, known_gamma=None) -> FederatedEstimate:
    """Federated AIPW from site data or from precomputed :class:`AipwSummary`.

    Restricted: outcome and propensity models are federated by Hessian
    weighting, each site evaluates AIPW with them and the site effects are
    combined by inverse-variance weighting. Unrestricted: each site uses its
    own fitted nuisances and the effects are combined by sample size.
    """
    mode = Mode.parse(mode)
    if not isinstance(sites, Mapping) and len(sites) and isinstance(list(sites)[0], AipwSummary):
        return federated_aipw_combine(sites, mode)
    family = Family.logit() if family is None else family
    items = as_sites(sites)
    first = items[0][1]
    layout_beta = default_layout(first) if layout_beta is None else layout_beta
    layout_gamma = default_layout(first, space="gamma") if layout_gamma is None else layout_gamma
    if mode is Mode.RESTRICTED:
        beta_mode = Mode.RESTRICTED if layout_beta.is_restricted else Mode.UNRESTRICTED
        beta = federated_mle_from_data(items, layout_beta, family, beta_mode).point
        pm = PropensityMode.KNOWN_STABLE if known_gamma is not None else (
            PropensityMode.ESTIMATED_STABLE if layout_gamma.is_restricted
            else PropensityMode.UNSTABLE)
        gamma, _, _ = _resolve_gamma(items, layout_gamma, pm, known_gamma)
        summaries = [
            site_aipw_summary(d, sid, federated_nuisances(beta, gamma, sid, layout_beta,
                                                          layout_gamma, family), estimand)
            for sid, d in items
        ]
        extras = {"beta": beta, "gamma": gamma}
    else:
        summaries = [
            site_aipw_summary(d, sid, site_local_nuisances(d, sid, layout_beta, layout_gamma,
                                                           family, known_gamma), estimand)
            for sid, d in items
        ]
        extras = {}
    est = federated_aipw_combine(summaries, mode)
    return replace(est, extras=extras)
