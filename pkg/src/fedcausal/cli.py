"""Command-line interface.

Subcommands: ``fit`` (one dataset), ``summarize`` (one site, one round),
``federate`` (coordinator, one round) and ``simulate``.

Exit codes: 0 success, 2 input or usage error, 3 model failure,
4 overlap hard failure, 5 layout fingerprint mismatch.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from fedcausal import sim
from fedcausal.aipw import Provenance, estimate_aipw, glm_nuisances
from fedcausal.data import INTERCEPT, Dataset, design_from_names, outcome_design
from fedcausal.errors import (
    FedCausalError,
    FingerprintMismatchError,
    OverlapError,
    ProtocolError,
)
from fedcausal.federation import FederatedEstimate, PropensityMode
from fedcausal.glm import Family, fit_mle, robust_variance
from fedcausal.ipw_mle import fit_ipw_mle, treatment_effect_from_ipw_mle
from fedcausal.propensity import Estimand, check_overlap, fit_propensity, known_propensity
from fedcausal.protocol import (
    Round,
    RoundMessage,
    SessionConfig,
    broadcast,
    coordinator_reduce,
    dumps,
    estimate_to_dict,
    layout_fingerprint,
    site_respond,
)
from fedcausal.weighting import GlobalLayout, Mode, Scheme, inverse_variance_weighting

EXIT_INPUT = 2
EXIT_MODEL = 3
EXIT_OVERLAP = 4
EXIT_FINGERPRINT = 5

ROLE_SUFFIX = {
    Round.PROPENSITY_UP: ".pup.json",
    Round.PROPENSITY_DOWN: ".pdown.json",
    Round.OUTCOME_UP: ".oup.json",
    Round.RESULT_DOWN: ".result.json",
}
OVERLAP_ETA = 0.01


class InputError(Exception):
    """Bad CSV, missing column or malformed flag value."""


# ---------------------------------------------------------------- inputs


def read_csv(path, outcome: str, treatment: str, covariates, site_id=None) -> Dataset:
    """Read a header-first, comma-separated file with no missing cells."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise InputError(f"{path}: empty file") from None
            rows = list(reader)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    covariates = list(covariates)
    for name in [outcome, treatment] + covariates:
        if name not in header:
            raise InputError(f"{path}: missing column {name!r}")
    cols = [header.index(n) for n in [outcome, treatment] + covariates]
    values = np.empty((len(rows), len(cols)))
    for i, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise InputError(f"{path}: line {i} has {len(row)} fields, expected {len(header)}")
        for j, c in enumerate(cols):
            cell = row[c].strip()
            if cell == "":
                raise InputError(f"{path}: empty cell in column {header[c]!r} at line {i}")
            try:
                values[i - 2, j] = float(cell)
            except ValueError:
                raise InputError(f"{path}: cannot parse {cell!r} in column {header[c]!r} "
                                 f"at line {i}") from None
    if not rows:
        raise InputError(f"{path}: no data rows")
    w = values[:, 1]
    if not np.all((w == 0) | (w == 1)):
        raise InputError(f"{path}: treatment column {treatment!r} must be 0/1")
    try:
        return Dataset(values[:, 2:], w, values[:, 0], tuple(covariates), treatment, site_id)
    except FedCausalError as exc:
        raise InputError(f"{path}: {exc}") from exc


def write_csv(path, data: Dataset, outcome="y"):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([outcome, data.treatment_name, *data.covariate_names])
        for i in range(data.n):
            wr.writerow([repr(float(data.y[i])), repr(float(data.w[i]))]
                        + [repr(float(v)) for v in data.x[i]])


def _split_list(text):
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _parse_unstable(items) -> dict:
    out = {}
    for item in items or []:
        if ":" not in item:
            raise InputError(f"--unstable expects site:col1,col2, got {item!r}")
        site, cols = item.split(":", 1)
        out.setdefault(site.strip(), []).extend(_split_list(cols))
    return out


def _family(args) -> Family:
    return Family("logit" if args.family == "logit" else "linear", args.dispersion)


def _layouts(args, treatment: str, covariates):
    unstable = _parse_unstable(args.unstable)
    unstable_p = _parse_unstable(getattr(args, "unstable_propensity", None))
    taken = {c for cols in unstable.values() for c in cols}
    taken_p = {c for cols in unstable_p.values() for c in cols}
    if treatment in taken:
        raise InputError("the treatment coefficient is always shared")
    for c in taken | taken_p:
        if c != INTERCEPT and c not in covariates:
            raise InputError(f"unstable column {c!r} is not among the covariates")
    if args.mode == "restricted" and (unstable or unstable_p):
        raise InputError("restricted mode does not allow unstable columns")
    shared = [n for n in (INTERCEPT, treatment, *covariates) if n not in taken]
    shared_p = [n for n in (INTERCEPT, *covariates) if n not in taken_p]
    return GlobalLayout.build(shared, unstable), GlobalLayout.build(shared_p, unstable_p)


def _known_gamma(spec: str, names) -> tuple | None:
    if spec == "estimate":
        return None
    if not spec.startswith("known:"):
        raise InputError("--propensity must be 'estimate' or 'known:<file>'")
    path = spec[len("known:"):]
    try:
        with open(path, encoding="utf-8") as fh:
            coef = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read propensity coefficients from {path}: {exc}") from exc
    missing = [n for n in names if n not in coef]
    if missing:
        raise InputError(f"propensity file lacks coefficients {missing}")
    return tuple(float(coef[n]) for n in names)


def _session(args) -> SessionConfig:
    covariates = _split_list(args.covariates)
    lb, lg = _layouts(args, args.treatment, covariates)
    known = _known_gamma(args.propensity, lg.names)
    if known is not None and not lg.is_restricted:
        raise InputError("a known propensity needs a shared propensity layout")
    return SessionConfig(args.estimator, lb, lg, _family(args), args.estimand, args.mode,
                         PropensityMode.KNOWN_STABLE if known is not None
                         else PropensityMode.ESTIMATED_STABLE if lg.is_restricted
                         else PropensityMode.UNSTABLE,
                         known)


# ---------------------------------------------------------------- reports


def _coef_rows(names, beta, var, n):
    se = np.sqrt(np.diag(var) / n)
    return [{"name": nm, "estimate": float(b), "se": float(s), "ci_low": float(b - 1.96 * s),
             "ci_high": float(b + 1.96 * s)} for nm, b, s in zip(names, beta, se)]


def _effect(tau, var, n):
    se = float(np.sqrt(var / n))
    return {"estimate": float(tau), "se": se, "ci_low": float(tau - 1.96 * se),
            "ci_high": float(tau + 1.96 * se), "var_scaled": float(var)}


def fit_report(data: Dataset, estimator: str, family: Family, estimand, known_gamma=None,
               propensity_covariates=None) -> dict:
    """Single-dataset estimate as a report dictionary (what ``fit`` writes)."""
    estimand = Estimand.parse(estimand)
    report = {"estimator": estimator, "family": family.kind, "estimand": estimand.value,
              "n": data.n, "n_treated": data.n_treated}
    X, names = outcome_design(data)
    diag = {}
    if estimator == "mle":
        fit = fit_mle(X, data.y, family)
        if not fit.converged:
            raise FedCausalError("outcome model did not converge")
        report["coefficients"] = _coef_rows(names, fit.beta_hat,
                                            robust_variance(X, data.y, fit.beta_hat, family),
                                            data.n)
        diag["outcome"] = {"converged": fit.converged, "iterations": fit.iterations,
                           "separation": fit.separation}
        report["diagnostics"] = diag
        return report
    prop = fit_propensity(data, propensity_covariates) if known_gamma is None \
        else known_propensity(data, known_gamma, propensity_covariates)
    ov = check_overlap(prop, OVERLAP_ETA)
    diag["overlap"] = {"eta": ov.eta, "n_violations": ov.n_violations, "min_e": ov.min_e,
                       "max_e": ov.max_e}
    diag["propensity_known"] = prop.known
    if not prop.known:
        Z = design_from_names(data, prop.names)
        report["propensity_coefficients"] = _coef_rows(
            prop.names, prop.gamma_hat,
            robust_variance(Z, data.w, prop.gamma_hat, Family.logit()), data.n)
    if estimator == "ipw-mle":
        fit = fit_ipw_mle(data, family, prop, estimand)
        report["coefficients"] = _coef_rows(names, fit.beta_hat, fit.variance_scaled, data.n)
        tau, var = treatment_effect_from_ipw_mle(data, fit, family, estimand)
        report["treatment_effect"] = _effect(tau, var, data.n)
    else:
        fit = fit_mle(X, data.y, family)
        if not fit.converged:
            raise FedCausalError("outcome model did not converge")
        nz = glm_nuisances(fit.beta_hat, names, family, prop.gamma_hat, prop.names,
                           Provenance.SITE_LOCAL)
        res = estimate_aipw(data, nz, estimand)
        report["treatment_effect"] = _effect(res.tau_hat, res.var_scaled, res.n)
    report["diagnostics"] = diag
    return report


def estimate_report(est: FederatedEstimate) -> dict:
    out = estimate_to_dict(est)
    if np.ndim(est.point) == 0:
        out["treatment_effect"] = _effect(est.point, est.var_scaled, est.n_pool)
    else:
        rows = []
        for i, name in enumerate(est.names):
            b = float(est.point[i])
            if np.isnan(b):
                continue
            s = float(np.sqrt(est.var_scaled[i, i] / est.n_pool))
            rows.append({"name": name, "estimate": b, "se": s, "ci_low": b - 1.96 * s,
                         "ci_high": b + 1.96 * s})
        out["coefficients"] = rows
    return out


def _print_report(report: dict, stream=None):
    stream = sys.stdout if stream is None else stream
    for row in report.get("coefficients", []):
        stream.write(f"{row['name']:>16s}  {row['estimate']: .6f}  se {row['se']:.6f}  "
                     f"95% CI [{row['ci_low']: .6f}, {row['ci_high']: .6f}]\n")
    te = report.get("treatment_effect")
    if te:
        stream.write(f"{'effect':>16s}  {te['estimate']: .6f}  se {te['se']:.6f}  "
                     f"95% CI [{te['ci_low']: .6f}, {te['ci_high']: .6f}]\n")


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc


def _write(path, text):
    Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_fit(args) -> int:
    covariates = _split_list(args.covariates)
    data = read_csv(args.input[0], args.outcome, args.treatment, covariates)
    known = _known_gamma(args.propensity, (INTERCEPT, *covariates))
    report = fit_report(data, args.estimator, _family(args), args.estimand, known)
    if args.out:
        _write(args.out, dumps(report) + "\n")
    _print_report(report)
    return 0


def _role_path(path: str, rnd: Round) -> str:
    suffix = ROLE_SUFFIX[rnd]
    return path if path.endswith(suffix) else path + suffix


def cmd_summarize(args) -> int:
    if not args.site_id:
        raise InputError("summarize needs --site-id")
    if not args.summary_out:
        raise InputError("summarize needs --summary-out")
    config = _session(args)
    data = read_csv(args.input[0], args.outcome, args.treatment, _split_list(args.covariates),
                    args.site_id)
    rounds = config.up_rounds()
    downlink = None
    if args.summary_in:
        downlink = RoundMessage.from_text(_read_text(args.summary_in[0]))
        if downlink.round is not Round.PROPENSITY_DOWN:
            raise InputError("--summary-in for summarize must be a coordinator broadcast")
        if downlink.layout_fingerprint != layout_fingerprint(config):
            raise FingerprintMismatchError("broadcast belongs to a different session")
        rnd = Round.OUTCOME_UP
    else:
        rnd = rounds[0]
    if rnd not in rounds:
        raise InputError(f"round {rnd.value} is not part of this estimator's schedule")
    if rnd is Round.OUTCOME_UP and len(rounds) == 2 and downlink is None:
        raise InputError("this estimator needs the coordinator broadcast via --summary-in")
    msg = site_respond(config, args.site_id, data, rnd, downlink)
    out = _role_path(args.summary_out, rnd)
    _write(out, msg.to_text())
    print(out)
    return 0


IVW_KIND = "ivw-summary"


def ivw_from_files(texts) -> FederatedEstimate:
    """Inverse-variance federation of hand-written summary files.

    Each file is a JSON object with ``kind`` equal to ``"ivw-summary"``,
    ``names``, ``estimate`` and either ``variance`` or ``inverse_variance``
    (unscaled). An optional ``n`` puts the result on the per-observation
    scale.
    """
    docs = [json.loads(t) for t in texts]
    names = tuple(docs[0]["names"])
    points, variances, ns = [], [], []
    for d in docs:
        if tuple(d["names"]) != names:
            raise FingerprintMismatchError("summary files list different coefficient names")
        points.append(np.asarray(d["estimate"], dtype=float))
        if "variance" in d:
            variances.append(np.asarray(d["variance"], dtype=float))
        else:
            variances.append(np.linalg.inv(np.asarray(d["inverse_variance"], dtype=float)))
        ns.append(d.get("n"))
    n_pool = int(sum(ns)) if all(n is not None for n in ns) else 1
    point, var = inverse_variance_weighting(points, variances, n_pool)
    return FederatedEstimate(point, var, n_pool, Scheme.INVERSE_VARIANCE, Mode.RESTRICTED,
                             names, "ivw")


def cmd_federate(args) -> int:
    if not args.summary_in:
        raise InputError("federate needs --summary-in files")
    texts = [_read_text(p) for p in args.summary_in]
    try:
        heads = [json.loads(t) for t in texts]
    except json.JSONDecodeError as exc:
        raise InputError(f"summary file is not JSON: {exc}") from exc
    kinds = {isinstance(h, dict) and h.get("kind") == IVW_KIND for h in heads}
    if kinds == {True}:
        report = estimate_report(ivw_from_files(texts))
        if args.out:
            _write(args.out, dumps(report) + "\n")
        _print_report(report)
        return 0
    if True in kinds:
        raise InputError("cannot mix hand-written and protocol summary files")
    msgs = [RoundMessage.from_text(t) for t in texts]
    fps = {m.layout_fingerprint for m in msgs}
    if len(fps) != 1:
        raise FingerprintMismatchError("summary files come from different layouts or settings")
    config = msgs[0].config
    rnd = msgs[0].round
    reduced = coordinator_reduce(config, rnd, msgs)
    if isinstance(reduced, FederatedEstimate):
        report = estimate_report(reduced)
        if args.out:
            _write(args.out, dumps(report) + "\n")
        _print_report(report)
        return 0
    if not args.summary_out:
        raise InputError("a propensity round needs --summary-out for the broadcast")
    msg = broadcast(config, Round.PROPENSITY_DOWN, reduced, ["*"])[0]
    out = _role_path(args.summary_out, Round.PROPENSITY_DOWN)
    _write(out, msg.to_text())
    print(out)
    return 0


def cmd_simulate(args) -> int:
    exp = args.experiment
    if exp == "normality":
        rows = sim.standardization_experiment(reps=args.reps or 2000, seed=args.seed,
                                             workers=args.workers)
        note = sim.NORMALITY_NOTE
    elif exp == "double-robustness":
        rows = sim.double_robustness_experiment(reps=args.reps or 50, seed=args.seed,
                                                workers=args.workers)
        note = None
    elif exp == "coverage":
        rows = [sim.coverage_experiment(reps=args.reps or 1000, seed=args.seed)]
        note = None
    else:
        rows = [sim.hotelling_experiment(reps=args.reps or 1000, seed=args.seed)]
        note = None
    text = sim.to_text(rows, note=note)
    if args.out:
        _write(args.out + ".csv", sim.to_csv(rows))
        _write(args.out + ".txt", text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", nargs="+", default=[])
    common.add_argument("--outcome", default="y")
    common.add_argument("--treatment", default="w")
    common.add_argument("--covariates", default="")
    common.add_argument("--family", choices=["logit", "linear"], default="logit")
    common.add_argument("--dispersion", type=float, default=1.0)
    common.add_argument("--estimand", choices=["ate", "att"], default="ate")
    common.add_argument("--estimator", choices=["mle", "ipw-mle", "aipw"], default="mle")
    common.add_argument("--mode", choices=["restricted", "unrestricted"], default="restricted")
    common.add_argument("--unstable", action="append", metavar="SITE:COLS")
    common.add_argument("--unstable-propensity", action="append", metavar="SITE:COLS")
    common.add_argument("--propensity", default="estimate", metavar="{estimate,known:FILE}")
    common.add_argument("--site-id")
    common.add_argument("--summary-out")
    common.add_argument("--summary-in", nargs="+")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--reps", type=int)
    common.add_argument("--out")

    parser = argparse.ArgumentParser(prog="fedcausal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", parents=[common], help="estimate on one CSV file")
    sub.add_parser("summarize", parents=[common], help="write one site's summary for a round")
    sub.add_parser("federate", parents=[common], help="combine site summaries")
    p = sub.add_parser("simulate", parents=[common], help="run a simulation experiment")
    p.add_argument("--experiment", choices=["normality", "double-robustness", "coverage", "hotelling"],
                   default="normality")
    p.add_argument("--workers", type=int, default=1, help="processes for replications")
    return parser


COMMANDS = {"fit": cmd_fit, "summarize": cmd_summarize, "federate": cmd_federate,
            "simulate": cmd_simulate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FingerprintMismatchError as exc:
        print(f"fingerprint mismatch: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except ProtocolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OverlapError as exc:
        print(f"overlap failure: {exc}", file=sys.stderr)
        return EXIT_OVERLAP
    except (FedCausalError, ValueError) as exc:
        print(f"model failure: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
