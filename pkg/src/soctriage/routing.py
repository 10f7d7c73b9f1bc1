"""Cloud router: minimal-context category classification with a confidence
threshold that sends uncertain or failed routes to the fallback expert."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from .experts import ExpertRegistry
from .ontology import CATEGORIES, CRITICAL_SLOTS, NormalizedAlert
from .protocol import DEFAULT_TIMEOUT_S, ProtocolError, shared_pool
from .relevance import token_len, words

log = logging.getLogger(__name__)

BACKENDS = ("keyword_rules", "fixture", "external")
DEFAULT_REDACTION = ("behavior", "protocol", "category_hints")
HINTS = "category_hints"

DEFAULT_ROUTE_RULES: Dict[str, Dict[str, float]] = {
    "Malware": {"trojan": 3, "ransomware": 3, "worm": 3, "backdoor": 3, "malware": 3,
                "implant": 2, "beacon": 2, "c2": 2},
    "Exploitation": {"injection": 3, "sql": 2, "xss": 3, "csrf": 3, "exploit": 3,
                     "shellcode": 2, "escalation": 2},
    "Reconnaissance": {"scan": 3, "sweep": 3, "probe": 2, "enumeration": 2, "nmap": 2, "masscan": 2},
    "Exfiltration": {"exfiltration": 3, "upload": 2, "outbound": 2, "tunneling": 3, "rclone.exe": 2},
    "DoS": {"flood": 3, "amplification": 3, "syn": 2, "dos": 3},
    "Other": {"policy": 1, "login": 1, "lateral": 2, "suspicious": 1},
}


class RouterError(ValueError):
    pass


class BackendFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class KeywordRouteRules:
    weights: Mapping[str, Mapping[str, float]] = field(default_factory=lambda: DEFAULT_ROUTE_RULES)
    categories: Tuple[str, ...] = CATEGORIES

    def validate(self) -> List[str]:
        problems = [f"no keywords for {c}" for c in self.categories if not self.weights.get(c)]
        problems += [f"rules name unknown category {c}" for c in self.weights if c not in self.categories]
        for c, table in self.weights.items():
            problems += [f"negative weight {c}/{w}" for w, v in table.items() if v < 0]
        return problems


def category_scores(text: str, rules: KeywordRouteRules) -> Dict[str, float]:
    tokens = words(text)
    return {
        c: math.fsum(float(rules.weights.get(c, {}).get(t, 0.0)) for t in tokens)
        for c in rules.categories
    }


def classify_keywords(alert: NormalizedAlert, rules: KeywordRouteRules = KeywordRouteRules()) -> Tuple[str, float]:
    """Softmax over summed keyword weights; ties go to the alphabetically first category."""
    scores = category_scores(alert.text(), rules)
    if all(v == 0 for v in scores.values()):
        other = "Other" if "Other" in rules.categories else sorted(rules.categories)[0]
        return other, 1.0 / len(rules.categories)
    top = max(scores.values())
    winner = min(c for c, v in scores.items() if v == top)
    denom = math.fsum(math.exp(v - top) for v in scores.values())
    return winner, 1.0 / denom


@dataclass(frozen=True)
class RouterConfig:
    tau: float = 0.6
    backend: str = "keyword_rules"
    params: Mapping[str, Any] = field(default_factory=dict)
    redaction: Tuple[str, ...] = DEFAULT_REDACTION
    max_response_tokens: int = 4
    simulated_latency_s: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise RouterError("tau must lie in [0, 1]")
        if self.backend not in BACKENDS:
            raise RouterError(f"backend must be one of {BACKENDS}")
        allowed = set(CRITICAL_SLOTS) | {HINTS}
        unknown = [r for r in self.redaction if r not in allowed]
        if unknown:
            raise RouterError(f"redaction names unknown fields: {unknown}")
        if self.backend == "external" and not self.params.get("command"):
            raise RouterError("external router backend needs a command")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RouterConfig":
        lat = d.get("simulated_latency_s")
        return cls(
            tau=float(d.get("tau", 0.6)),
            backend=d.get("backend", "keyword_rules"),
            params=dict(d.get("params") or {}),
            redaction=tuple(d.get("redaction", DEFAULT_REDACTION)),
            max_response_tokens=int(d.get("max_response_tokens", 4)),
            simulated_latency_s=None if lat is None else float(lat),
        )

    def rules(self) -> KeywordRouteRules:
        table = self.params.get("rules")
        return KeywordRouteRules(table) if table else KeywordRouteRules()


@dataclass(frozen=True)
class RoutingDecision:
    k_pred: str
    p_conf: float
    routed_expert: str
    used_fallback: bool
    degraded: bool
    request_payload: Mapping[str, Any]
    response_tokens: int
    latency_s: float

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["request_payload"] = dict(self.request_payload)
        return d


def redact(alert: NormalizedAlert, cfg: RouterConfig) -> Dict[str, Any]:
    """The exact document that crosses to the cloud: allow-listed keys only."""
    doc: Dict[str, Any] = {}
    for key in cfg.redaction:
        if key == HINTS:
            scores = category_scores(alert.text(), cfg.rules())
            doc[HINTS] = sorted(c for c, v in scores.items() if v > 0)
        else:
            doc[key] = getattr(alert, key)
    return doc


_fixtures: Dict[str, Dict[str, Any]] = {}


def _fixture_table(params: Mapping[str, Any]) -> Mapping[str, Any]:
    if "table" in params:
        return params["table"]
    path = str(params["path"])
    if path not in _fixtures:
        _fixtures[path] = json.loads(Path(path).read_text())
    return _fixtures[path]


def _call_backend(alert: NormalizedAlert, doc: Mapping[str, Any], cfg: RouterConfig) -> Tuple[str, float, str]:
    if cfg.backend == "keyword_rules":
        cat, conf = classify_keywords(alert, cfg.rules())
        return cat, conf, f"{cat} {conf:.2f}"
    if cfg.backend == "fixture":
        try:
            entry = _fixture_table(cfg.params)[alert.alert_id]
        except KeyError:
            raise BackendFailure(f"fixture has no route for {alert.alert_id}") from None
        except OSError as exc:
            raise BackendFailure(f"fixture unreadable: {exc}") from exc
        cat, conf = entry["category"], float(entry["confidence"])
        return cat, conf, f"{cat} {conf:.2f}"
    pool = shared_pool(
        cfg.params["command"],
        int(cfg.params.get("processes", 1)),
        float(cfg.params.get("timeout_s", DEFAULT_TIMEOUT_S)),
    )
    try:
        reply = pool.request({"id": alert.alert_id, "context": dict(doc), "categories": list(CATEGORIES)})
        cat, conf = str(reply["category"]), float(reply["confidence"])
    except ProtocolError as exc:
        raise BackendFailure(str(exc)) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise BackendFailure(f"bad router response: {exc}") from exc
    return cat, conf, str(reply.get("text") or f"{cat} {conf}")


def route(alert: NormalizedAlert, cfg: RouterConfig, registry: ExpertRegistry) -> RoutingDecision:
    """Classify and pick an expert. Backend failures never escape: they come
    back as ``degraded`` decisions routed to the fallback."""
    started = time.perf_counter()
    doc = redact(alert, cfg)
    degraded = False
    tokens = 0
    if not alert.present_slots():
        # Nothing to classify; straight to the fallback expert.
        k_pred, p_conf = "Other", 0.0
    else:
        try:
            k_pred, p_conf, text = _call_backend(alert, doc, cfg)
            if k_pred not in CATEGORIES or not (math.isfinite(p_conf) and 0.0 <= p_conf <= 1.0):
                raise BackendFailure(f"out-of-taxonomy answer {k_pred!r}/{p_conf!r}")
            tokens = token_len(text)
            if tokens > cfg.max_response_tokens:
                log.warning("router response for %s used %d tokens (cap %d)",
                            alert.alert_id, tokens, cfg.max_response_tokens)
        except BackendFailure as exc:
            log.warning("router degraded for %s: %s", alert.alert_id, exc)
            k_pred, p_conf, degraded, tokens = "Other", 0.0, True, 0
    used_fallback = degraded or p_conf < cfg.tau
    expert = registry.fallback_id if used_fallback else registry.expert_for(k_pred)
    elapsed = time.perf_counter() - started
    latency = cfg.simulated_latency_s if cfg.simulated_latency_s is not None else elapsed
    return RoutingDecision(k_pred, p_conf, expert, used_fallback, degraded, doc, tokens, latency)
