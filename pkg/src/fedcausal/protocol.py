"""Message formats and round orchestration between a coordinator and sites.

Messages are JSON text. Floats are written with 17 significant digits so
they round-trip exactly; matrices are stored row-major with explicit row
and column names. No message field carries per-row data.

The same two functions drive both the in-process session
(:func:`run_session`) and offline federation through files (the CLI):
:func:`site_respond` produces a site's up message for a round and
:func:`coordinator_reduce` turns the up messages of a round into either a
broadcast payload or the final estimate.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from fedcausal.aipw import Provenance
from fedcausal.data import Dataset
from fedcausal.errors import (
    FingerprintMismatchError,
    LayoutError,
    PaddingViolationError,
    ProtocolError,
    SiteFailureError,
    VersionMismatchError,
)
from fedcausal.federation import (
    AipwSummary,
    FederatedEstimate,
    PropensityMode,
    SiteSummary,
    as_sites,
    federated_aipw_combine,
    federated_ipw_combine,
    federated_mle,
    federated_nuisances,
    site_aipw_summary,
    site_ipw_summary,
    site_local_nuisances,
    site_mle_summary,
)
from fedcausal.glm import Family
from fedcausal.ipw_mle import MatrixBundle
from fedcausal.propensity import Estimand
from fedcausal.weighting import GlobalLayout, Mode, Scheme

PROTOCOL_VERSION = "fedcausal-protocol/1"
COORDINATOR = "coordinator"


class Round(str, enum.Enum):
    PROPENSITY_UP = "PropensityUp"
    PROPENSITY_DOWN = "PropensityDown"
    OUTCOME_UP = "OutcomeUp"
    RESULT_DOWN = "ResultDown"


# ---------------------------------------------------------------- JSON text


def _fmt(v: float) -> str:
    if math.isnan(v):
        return "NaN"
    if math.isinf(v):
        return "Infinity" if v > 0 else "-Infinity"
    return format(v, ".17g")


def dumps(obj, indent: int = 0) -> str:
    """JSON text with floats at 17 significant digits.

    Lists of numbers stay on one line so matrices read row by row.
    """
    pad = " " * indent
    inner = " " * (indent + 1)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, Mapping):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {dumps(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool)
               for v in obj):
            return "[" + ", ".join(dumps(v) for v in obj) + "]"
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(inner + dumps(v, indent + 1) for v in obj) + "\n" + pad + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def loads(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed message: {exc}") from exc


def encode_vector(v, names) -> dict:
    v = np.asarray(v, dtype=float)
    return {"names": list(names), "data": v.tolist()}


def decode_vector(d) -> np.ndarray:
    v = np.array(d["data"], dtype=float)
    if v.shape != (len(d["names"]),):
        raise ProtocolError("vector length does not match its names")
    return v


def encode_matrix(m, rows, cols) -> dict:
    m = np.asarray(m, dtype=float)
    return {"rows": list(rows), "cols": list(cols), "shape": list(m.shape), "data": m.tolist()}


def decode_matrix(d) -> np.ndarray:
    shape = tuple(d["shape"])
    m = np.array(d["data"], dtype=float).reshape(shape)
    if shape != (len(d["rows"]), len(d["cols"])):
        raise ProtocolError("matrix shape does not match its names")
    return m


# ---------------------------------------------------------------- session config


@dataclass(frozen=True)
class SessionConfig:
    """What every party must agree on before a session starts."""

    estimator: str
    layout_beta: GlobalLayout
    layout_gamma: GlobalLayout | None = None
    family: Family = field(default_factory=Family.logit)
    estimand: Estimand = Estimand.ATE
    mode: Mode = Mode.RESTRICTED
    propensity: PropensityMode = PropensityMode.ESTIMATED_STABLE
    known_gamma: tuple | None = None
    residuals: str = "score"

    def __post_init__(self):
        est = str(self.estimator).lower()
        if est not in ("mle", "ipw-mle", "aipw"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        object.__setattr__(self, "estimator", est)
        object.__setattr__(self, "estimand", Estimand.parse(self.estimand))
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        object.__setattr__(self, "propensity", PropensityMode(self.propensity))
        if self.known_gamma is not None:
            object.__setattr__(self, "known_gamma", tuple(float(g) for g in self.known_gamma))
            object.__setattr__(self, "propensity", PropensityMode.KNOWN_STABLE)
        if est != "mle" and self.layout_gamma is None:
            raise ValueError(f"{est} needs a propensity layout")
        if self.propensity is PropensityMode.KNOWN_STABLE and self.known_gamma is None \
                and est != "mle":
            raise ValueError("known propensity mode needs known_gamma")
        if self.mode is Mode.RESTRICTED and est != "aipw":
            for lay in (self.layout_beta, self.layout_gamma):
                if lay is not None and not lay.is_restricted:
                    raise LayoutError("restricted mode requires layouts without unstable blocks")

    @property
    def propensity_known(self) -> bool:
        return self.known_gamma is not None

    def up_rounds(self) -> list[Round]:
        """Rounds in which sites send messages, in order."""
        if self.estimator == "mle":
            return [Round.OUTCOME_UP]
        if self.estimator == "ipw-mle":
            return [Round.OUTCOME_UP] if self.propensity_known \
                else [Round.PROPENSITY_UP, Round.OUTCOME_UP]
        if self.mode is Mode.RESTRICTED:
            return [Round.PROPENSITY_UP, Round.OUTCOME_UP]
        return [Round.OUTCOME_UP]

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "layout_beta": self.layout_beta.to_dict(),
            "layout_gamma": None if self.layout_gamma is None else self.layout_gamma.to_dict(),
            "family": self.family.kind,
            "dispersion": self.family.dispersion,
            "estimand": self.estimand.value,
            "mode": self.mode.value,
            "propensity": self.propensity.value,
            "known_gamma": None if self.known_gamma is None else list(self.known_gamma),
            "residuals": self.residuals,
        }

    @classmethod
    def from_dict(cls, d) -> "SessionConfig":
        return cls(
            d["estimator"], GlobalLayout.from_dict(d["layout_beta"]),
            None if d["layout_gamma"] is None else GlobalLayout.from_dict(d["layout_gamma"]),
            Family(d["family"], d["dispersion"]), d["estimand"], d["mode"], d["propensity"],
            None if d["known_gamma"] is None else tuple(d["known_gamma"]), d["residuals"])


def layout_fingerprint(config_or_layout) -> str:
    """SHA-256 over the layouts (name order matters) and session settings."""
    if isinstance(config_or_layout, GlobalLayout):
        body = {"layout": config_or_layout.to_dict()}
    else:
        body = config_or_layout.to_dict()
    text = dumps({"version": PROTOCOL_VERSION, "body": body})
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------- summaries


def summary_to_dict(s: SiteSummary, layout_beta: GlobalLayout,
                    layout_gamma: GlobalLayout | None) -> dict:
    own = layout_beta if s.space == "beta" else layout_gamma
    gnames = layout_gamma.names if layout_gamma is not None else ()
    names = own.names
    b = s.bundle_pad
    bundle = {"n": b.n, "estimand": None if b.estimand is None else b.estimand.value}
    for k, m in b.matrices().items():
        rows = gnames if k in ("A_gamma", "B_gamma") else names
        cols = gnames if k in ("A_gamma", "B_gamma", "C", "C1", "C2") else names
        bundle[k] = encode_matrix(m, rows, cols)
    return {
        "type": "site_summary",
        "site_id": s.site_id,
        "n": s.n,
        "kind": s.kind,
        "space": s.space,
        "local_names": list(s.names),
        "local_gamma_names": list(s.gamma_names),
        "propensity_known": s.propensity_known,
        "converged": s.converged,
        "layout_beta": layout_beta.to_dict(),
        "layout_gamma": None if layout_gamma is None else layout_gamma.to_dict(),
        "beta_pad": encode_vector(s.beta_pad, names),
        "hessian_pad": encode_matrix(s.hessian_pad, names, names),
        "bundle_pad": bundle,
    }


def _check_padding(arr, allowed_rows, allowed_cols, what):
    mask = np.ones(arr.shape, dtype=bool)
    if arr.ndim == 1:
        mask[allowed_rows] = False
    else:
        mask[np.ix_(allowed_rows, allowed_cols)] = False
    if np.any(arr[mask] != 0.0):
        raise PaddingViolationError(f"{what} has nonzero entries outside the site's blocks")


def summary_from_dict(d) -> tuple[SiteSummary, GlobalLayout, GlobalLayout | None]:
    """Decode a summary and validate its padding; returns the layouts too."""
    if d.get("type") != "site_summary":
        raise ProtocolError("payload is not a site summary")
    lb = GlobalLayout.from_dict(d["layout_beta"])
    lg = None if d["layout_gamma"] is None else GlobalLayout.from_dict(d["layout_gamma"])
    site = d["site_id"]
    own = lb if d["space"] == "beta" else lg
    if own is None:
        raise ProtocolError("summary space has no layout")
    ri = own.indices(site, d["local_names"])
    gi = lg.indices(site, d["local_gamma_names"]) if (lg is not None and d["local_gamma_names"]) \
        else np.array([], dtype=int)
    beta = decode_vector(d["beta_pad"])
    hess = decode_matrix(d["hessian_pad"])
    if beta.shape != (own.total_dim,) or hess.shape != (own.total_dim,) * 2:
        raise ProtocolError("padded arrays do not match the layout")
    _check_padding(beta, ri, None, "beta_pad")
    _check_padding(hess, ri, ri, "hessian_pad")
    bd = d["bundle_pad"]
    mats = {}
    for k in MatrixBundle.MATRIX_FIELDS:
        if k in bd:
            m = decode_matrix(bd[k])
            rows = gi if k in ("A_gamma", "B_gamma") else ri
            cols = gi if k in ("A_gamma", "B_gamma", "C", "C1", "C2") else ri
            _check_padding(m, rows, cols, k)
            mats[k] = m
    bundle = MatrixBundle(n=int(bd["n"]),
                          estimand=None if bd["estimand"] is None else Estimand(bd["estimand"]),
                          **mats)
    s = SiteSummary(site, int(d["n"]), d["kind"], d["space"], tuple(d["local_names"]), beta,
                    hess, bundle, tuple(d["local_gamma_names"]), bool(d["propensity_known"]),
                    bool(d["converged"]))
    return s, lb, lg


def serialize_summary(summary: SiteSummary, layout_beta: GlobalLayout,
                      layout_gamma: GlobalLayout | None = None) -> bytes:
    """Self-describing, fingerprinted JSON encoding of a site summary."""
    body = summary_to_dict(summary, layout_beta, layout_gamma)
    fp = _pair_fingerprint(layout_beta, layout_gamma)
    doc = {"protocol_version": PROTOCOL_VERSION, "layout_fingerprint": fp, "payload": body}
    return (dumps(doc) + "\n").encode("utf-8")


def _pair_fingerprint(lb: GlobalLayout, lg: GlobalLayout | None) -> str:
    body = {"beta": lb.to_dict(), "gamma": None if lg is None else lg.to_dict()}
    text = dumps({"version": PROTOCOL_VERSION, "layouts": body})
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def deserialize_summary(data: bytes | str, expected_fingerprint: str | None = None) -> SiteSummary:
    """Inverse of :func:`serialize_summary`, with version, fingerprint and
    padding checks."""
    doc = loads(data.decode("utf-8") if isinstance(data, bytes) else data)
    if doc.get("protocol_version") != PROTOCOL_VERSION:
        raise VersionMismatchError(f"unsupported protocol version {doc.get('protocol_version')!r}")
    s, lb, lg = summary_from_dict(doc["payload"])
    fp = _pair_fingerprint(lb, lg)
    if doc.get("layout_fingerprint") != fp:
        raise FingerprintMismatchError("fingerprint does not match the embedded layouts")
    if expected_fingerprint is not None and fp != expected_fingerprint:
        raise FingerprintMismatchError("summary belongs to a different layout")
    return s


def aipw_to_dict(a: AipwSummary) -> dict:
    return {"type": "aipw_summary", "site_id": a.site_id, "n": a.n, "tau_hat": a.tau_hat,
            "var_scaled": a.var_scaled, "estimand": a.estimand.value,
            "provenance": a.provenance.value}


def aipw_from_dict(d) -> AipwSummary:
    if d.get("type") != "aipw_summary":
        raise ProtocolError("payload is not an AIPW summary")
    return AipwSummary(d["site_id"], int(d["n"]), float(d["tau_hat"]), float(d["var_scaled"]),
                       Estimand(d["estimand"]), Provenance(d["provenance"]))


def estimate_to_dict(e: FederatedEstimate) -> dict:
    out = {"type": "federated_estimate", "estimator": e.estimator, "n_pool": e.n_pool,
           "scheme": e.scheme.value, "mode": e.mode.value,
           "estimand": None if e.estimand is None else e.estimand.value}
    if np.ndim(e.point) == 0:
        out.update(point=float(e.point), var_scaled=float(e.var_scaled), se=float(e.se))
    else:
        names = list(e.names)
        out.update(point=encode_vector(e.point, names),
                   var_scaled=encode_matrix(e.var_scaled, names, names),
                   se=encode_vector(e.se, names))
    return out


def estimate_from_dict(d) -> FederatedEstimate:
    if d.get("type") != "federated_estimate":
        raise ProtocolError("payload is not a federated estimate")
    if isinstance(d["point"], dict):
        point, var = decode_vector(d["point"]), decode_matrix(d["var_scaled"])
        names = tuple(d["point"]["names"])
    else:
        point, var, names = float(d["point"]), float(d["var_scaled"]), None
    return FederatedEstimate(point, var, int(d["n_pool"]), Scheme(d["scheme"]), Mode(d["mode"]),
                             names, d["estimator"],
                             None if d["estimand"] is None else Estimand(d["estimand"]))


# ---------------------------------------------------------------- messages


@dataclass(frozen=True)
class RoundMessage:
    """One message of a session, kept as its exact wire text."""

    round: Round
    sender: str
    recipient: str
    layout_fingerprint: str
    payload: dict
    session: dict
    protocol_version: str = PROTOCOL_VERSION

    def to_text(self) -> str:
        return dumps({
            "protocol_version": self.protocol_version,
            "round": self.round.value,
            "sender": self.sender,
            "recipient": self.recipient,
            "layout_fingerprint": self.layout_fingerprint,
            "session": self.session,
            "payload": self.payload,
        }) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RoundMessage":
        d = loads(text)
        if d.get("protocol_version") != PROTOCOL_VERSION:
            raise VersionMismatchError(f"unsupported protocol version {d.get('protocol_version')!r}")
        msg = cls(Round(d["round"]), d["sender"], d["recipient"], d["layout_fingerprint"],
                  d["payload"], d["session"], d["protocol_version"])
        config = SessionConfig.from_dict(msg.session)
        if layout_fingerprint(config) != msg.layout_fingerprint:
            raise FingerprintMismatchError("fingerprint does not match the session settings")
        return msg

    @property
    def config(self) -> SessionConfig:
        return SessionConfig.from_dict(self.session)


def _message(config: SessionConfig, rnd: Round, sender: str, recipient: str,
             payload: dict) -> RoundMessage:
    msg = RoundMessage(rnd, sender, recipient, layout_fingerprint(config), payload,
                       config.to_dict())
    # normalize through the wire text so in-process and file exchange agree bitwise
    return RoundMessage.from_text(msg.to_text())


def _known_gamma(config):
    return None if config.known_gamma is None else np.asarray(config.known_gamma, dtype=float)


def site_respond(config: SessionConfig, site_id: str, data: Dataset, rnd: Round,
                 downlink: RoundMessage | None = None) -> RoundMessage:
    """A site's up message for round ``rnd``.

    ``downlink`` is the coordinator's broadcast of the previous round when
    the schedule has one.
    """
    if downlink is not None:
        if downlink.layout_fingerprint != layout_fingerprint(config):
            raise FingerprintMismatchError("downlink belongs to a different session")
        if downlink.round is not Round.PROPENSITY_DOWN:
            raise ProtocolError(f"unexpected downlink round {downlink.round.value}")
    site_id = str(site_id)
    lb, lg, fam = config.layout_beta, config.layout_gamma, config.family
    est = config.estimator
    if rnd is Round.PROPENSITY_UP:
        if est == "ipw-mle":
            payload = {"gamma": summary_to_dict(site_mle_summary(data, site_id, lg, fam,
                                                                 space="gamma"), lb, lg)}
        elif est == "aipw":
            payload = {"beta": summary_to_dict(site_mle_summary(data, site_id, lb, fam), lb, lg)}
            if not config.propensity_known:
                payload["gamma"] = summary_to_dict(
                    site_mle_summary(data, site_id, lg, fam, space="gamma"), lb, lg)
        else:
            raise ProtocolError("MLE sessions have no propensity round")
    elif rnd is Round.OUTCOME_UP:
        if est == "mle":
            payload = {"beta": summary_to_dict(site_mle_summary(data, site_id, lb, fam), lb, lg)}
        elif est == "ipw-mle":
            gamma = _known_gamma(config) if config.propensity_known \
                else _down_vector(downlink, "gamma")
            s = site_ipw_summary(data, site_id, lb, lg, gamma, fam, config.estimand,
                                 propensity_known=config.propensity_known,
                                 residuals=config.residuals)
            payload = {"beta": summary_to_dict(s, lb, lg)}
        elif config.mode is Mode.RESTRICTED:
            nz = federated_nuisances(_down_vector(downlink, "beta"),
                                     _down_vector(downlink, "gamma"), site_id, lb, lg, fam)
            payload = {"tau": aipw_to_dict(site_aipw_summary(data, site_id, nz, config.estimand))}
        else:
            nz = site_local_nuisances(data, site_id, lb, lg, fam, _known_gamma(config))
            payload = {"tau": aipw_to_dict(site_aipw_summary(data, site_id, nz, config.estimand))}
    else:
        raise ProtocolError(f"sites do not send in round {rnd.value}")
    return _message(config, rnd, site_id, COORDINATOR, payload)


def _down_vector(msg: RoundMessage | None, key: str) -> np.ndarray:
    if msg is None or key not in msg.payload:
        raise ProtocolError(f"missing federated {key} from the coordinator")
    return decode_vector(msg.payload[key])


def _check_round(config: SessionConfig, rnd: Round, messages: Sequence[RoundMessage]):
    fp = layout_fingerprint(config)
    senders = []
    for m in messages:
        if m.layout_fingerprint != fp:
            raise FingerprintMismatchError(f"message from {m.sender!r} has a different fingerprint")
        if m.round is not rnd:
            raise ProtocolError(f"message from {m.sender!r} is for round {m.round.value}")
        senders.append(m.sender)
    if len(set(senders)) != len(senders):
        raise ProtocolError("duplicate senders in one round")
    if not messages:
        raise ProtocolError("no messages to reduce")
    return sorted(messages, key=lambda m: m.sender)


def _summaries(messages, key):
    out = []
    for m in messages:
        s, _, _ = summary_from_dict(m.payload[key])
        if s.site_id != m.sender:
            raise ProtocolError("summary site id differs from the sender")
        out.append(s)
    return out


def coordinator_reduce(config: SessionConfig, rnd: Round, messages: Sequence[RoundMessage]):
    """Aggregate one round.

    Returns the broadcast payload (a dict) after a propensity round and the
    :class:`FederatedEstimate` after the outcome round.
    """
    msgs = _check_round(config, rnd, messages)
    lb, lg = config.layout_beta, config.layout_gamma
    est = config.estimator
    if rnd is Round.PROPENSITY_UP:
        payload = {}
        gmode = Mode.RESTRICTED if lg.is_restricted else Mode.UNRESTRICTED
        if est == "aipw":
            bmode = Mode.RESTRICTED if lb.is_restricted else Mode.UNRESTRICTED
            beta = federated_mle(_summaries(msgs, "beta"), lb, bmode).point
            payload["beta"] = encode_vector(beta, lb.names)
        if config.propensity_known:
            gamma = np.asarray(config.known_gamma, dtype=float)
        else:
            gamma = federated_mle(_summaries(msgs, "gamma"), lg, gmode).point
        payload["gamma"] = encode_vector(gamma, lg.names)
        return payload
    if rnd is not Round.OUTCOME_UP:
        raise ProtocolError(f"the coordinator does not reduce round {rnd.value}")
    if est == "mle":
        return federated_mle(_summaries(msgs, "beta"), lb, config.mode)
    if est == "ipw-mle":
        return federated_ipw_combine(_summaries(msgs, "beta"), lb, lg, config.mode)
    return federated_aipw_combine([aipw_from_dict(m.payload["tau"]) for m in msgs], config.mode)


def broadcast(config: SessionConfig, rnd: Round, payload: dict, site_ids) -> list[RoundMessage]:
    return [_message(config, rnd, COORDINATOR, str(s), payload) for s in sorted(site_ids)]


def result_messages(config: SessionConfig, estimate: FederatedEstimate, site_ids):
    return broadcast(config, Round.RESULT_DOWN, estimate_to_dict(estimate), site_ids)


# ---------------------------------------------------------------- in-process session


class SiteNode:
    """A site holding its rows; answers coordinator requests."""

    def __init__(self, site_id: str, data: Dataset):
        self.site_id = str(site_id)
        self._data = data
        self.received: list[RoundMessage] = []

    def respond(self, config, rnd, downlink=None) -> RoundMessage:
        if downlink is not None:
            self.received.append(downlink)
        return site_respond(config, self.site_id, self._data, rnd, downlink)

    def deliver(self, message: RoundMessage):
        self.received.append(message)


@dataclass
class Transcript:
    """Ordered log of every message of a session as wire text."""

    messages: list = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def append(self, msg: RoundMessage):
        with self._lock:
            self.messages.append(msg.to_text())

    def __len__(self):
        return len(self.messages)

    def parsed(self) -> list[RoundMessage]:
        return [RoundMessage.from_text(t) for t in self.messages]

    def count(self, direction: str | None = None) -> int:
        if direction is None:
            return len(self.messages)
        want = (Round.PROPENSITY_UP, Round.OUTCOME_UP) if direction == "up" \
            else (Round.PROPENSITY_DOWN, Round.RESULT_DOWN)
        return sum(m.round in want for m in self.parsed())


def run_session(config: SessionConfig, sites, *, max_workers: int | None = None):
    """Run a full session in process.

    Sites answer each round concurrently; the coordinator waits for all of
    them, appends their messages to the transcript in site-id order and
    aggregates. Any site failure aborts the session.

    Returns
    -------
    (FederatedEstimate, Transcript)
    """
    nodes = [SiteNode(sid, d) for sid, d in as_sites(sites)]
    transcript = Transcript()
    downlinks: dict[str, RoundMessage | None] = {n.site_id: None for n in nodes}
    result = None
    with ThreadPoolExecutor(max_workers=max_workers or len(nodes)) as pool:
        for rnd in config.up_rounds():
            futures = [(n, pool.submit(n.respond, config, rnd, downlinks[n.site_id]))
                       for n in nodes]
            ups = []
            for n, fut in futures:
                exc = fut.exception()
                if exc is not None:
                    raise SiteFailureError(n.site_id, exc) from exc
                ups.append(fut.result())
            for m in ups:
                transcript.append(m)
            reduced = coordinator_reduce(config, rnd, ups)
            if isinstance(reduced, FederatedEstimate):
                result = reduced
            else:
                for m in broadcast(config, Round.PROPENSITY_DOWN, reduced, downlinks):
                    transcript.append(m)
                    downlinks[m.recipient] = m
    for m, n in zip(result_messages(config, result, [n.site_id for n in nodes]), nodes):
        transcript.append(m)
        n.deliver(m)
    return result, transcript
