"""Domain experts, the fallback expert, and SOAR document rendering."""
from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Mapping, Optional, Sequence, Tuple

from .ontology import (
    RISK_LEVELS,
    Label,
    LabelMapping,
    MissingLabel,
    NormalizedAlert,
    Taxonomy,
    map_label,
    validate_label,
)
from .protocol import DEFAULT_TIMEOUT_S, ProtocolError, shared_pool
from .relevance import token_len

if TYPE_CHECKING:
    from .routing import RoutingDecision

KINDS = ("mock_oracle", "mock_noisy", "fixture", "external")
FALLBACK = "fallback"
MOCK_CONFIDENCE = 0.99
UNKNOWN_LABEL = Label("Medium", "Other", "Unknown")


class ExpertError(ValueError):
    pass


class ExternalExpertFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class ExpertSpec:
    expert_id: str
    domain: str
    kind: str = "mock_oracle"
    params: Mapping[str, Any] = field(default_factory=dict)
    covers: Tuple[str, ...] = ()
    simulated_latency_s: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ExpertError(f"unknown expert kind {self.kind!r}")
        if self.kind == "mock_noisy":
            rate = float(self.params.get("noise_rate", 0.0))
            if not 0.0 <= rate <= 1.0:
                raise ExpertError("noise_rate must lie in [0, 1]")
        if self.kind == "external" and not self.params.get("command"):
            raise ExpertError("external expert needs a command")

    @property
    def categories(self) -> Tuple[str, ...]:
        if self.domain == FALLBACK:
            return ()
        return self.covers or (self.domain,)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExpertSpec":
        lat = d.get("simulated_latency_s")
        return cls(
            expert_id=str(d["expert_id"]),
            domain=str(d["domain"]),
            kind=d.get("kind", "mock_oracle"),
            params=dict(d.get("params") or {}),
            covers=tuple(d.get("covers") or ()),
            simulated_latency_s=None if lat is None else float(lat),
        )

    def to_dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {
            "expert_id": self.expert_id,
            "domain": self.domain,
            "kind": self.kind,
            "params": dict(self.params),
        }
        if self.covers:
            d["covers"] = list(self.covers)
        if self.simulated_latency_s is not None:
            d["simulated_latency_s"] = self.simulated_latency_s
        return d


@dataclass(frozen=True)
class ExpertOutput:
    reasoning: Tuple[str, ...]
    label: Label
    confidence: float
    escalate: bool = False

    def __post_init__(self):
        if not 1 <= len(self.reasoning) <= 5:
            raise ExpertError("reasoning must have 1-5 bullets")
        if any(not isinstance(r, str) or not r.strip() for r in self.reasoning):
            raise ExpertError("reasoning bullets must be non-empty strings")
        if not (math.isfinite(self.confidence) and 0.0 <= self.confidence <= 1.0):
            raise ExpertError("confidence must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExpertOutput":
        return cls(
            tuple(d["reasoning"]),
            Label.from_dict(d["label"]),
            float(d["confidence"]),
            bool(d.get("escalate", False)),
        )


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


def _truth(alert: NormalizedAlert, table: Optional[LabelMapping]) -> Optional[Label]:
    if alert.raw_label is None or table is None:
        return None
    try:
        return map_label(alert.raw_label, table)
    except MissingLabel:
        return None


def _bullets(alert: NormalizedAlert, label: Label) -> Tuple[str, ...]:
    seen = []
    if alert.process:
        seen.append(f"process {alert.process}")
    if alert.protocol:
        seen.append(f"protocol {alert.protocol}")
    if alert.dst_port is not None:
        seen.append(f"destination port {alert.dst_port}")
    if alert.file_hash:
        seen.append(f"file hash {alert.file_hash[:12]}")
    first = ("Observed " + ", ".join(seen) + ".") if seen else "No process, protocol, port or hash was available."
    second = f"Behavior reported as {alert.behavior}." if alert.behavior else "No behavior description was provided."
    third = f"Assessed as {label.risk_level} risk {label.category} of subtype {label.subtype}."
    return (first, second, third)


def shift_risk(level: str, up: bool) -> str:
    i = RISK_LEVELS.index(level)
    if i == 0:
        return RISK_LEVELS[1]
    if i == len(RISK_LEVELS) - 1:
        return RISK_LEVELS[-2]
    return RISK_LEVELS[i + 1] if up else RISK_LEVELS[i - 1]


class Expert:
    """An :class:`ExpertSpec` bound to the label table and taxonomy it answers in."""

    def __init__(self, spec: ExpertSpec, label_table: Optional[LabelMapping] = None,
                 taxonomy: Taxonomy = Taxonomy()):
        self.spec = spec
        self.label_table = label_table
        self.taxonomy = taxonomy
        self._fixture: Optional[Dict[str, Any]] = None

    @property
    def expert_id(self) -> str:
        return self.spec.expert_id

    def infer(self, alert: NormalizedAlert) -> ExpertOutput:
        kind = self.spec.kind
        if kind in ("mock_oracle", "mock_noisy"):
            out = self._mock(alert)
        elif kind == "fixture":
            out = self._replay(alert)
        else:
            out = self._external(alert)
        problems = validate_label(out.label, self.taxonomy)
        if problems:
            raise ExternalExpertFailure(f"{self.expert_id}: invalid label: {'; '.join(problems)}")
        return out

    def _mock(self, alert: NormalizedAlert) -> ExpertOutput:
        params = self.spec.params
        label = _truth(alert, self.label_table)
        needed = int(params.get("min_critical_fields", 0))
        if label is None or len(alert.present_slots()) < needed:
            return ExpertOutput(_bullets(alert, UNKNOWN_LABEL), UNKNOWN_LABEL, 0.5, escalate=True)
        confidence = MOCK_CONFIDENCE
        if self.spec.kind == "mock_noisy":
            rate = float(params.get("noise_rate", 0.0))
            rng = random.Random(int(params.get("seed", 0)) ^ stable_hash(alert.alert_id))
            flip, up = rng.random() < rate, rng.random() < 0.5
            if flip:
                label = Label(shift_risk(label.risk_level, up), label.category, label.subtype)
            confidence = round(MOCK_CONFIDENCE * (1.0 - rate), 6)
        return ExpertOutput(_bullets(alert, label), label, confidence)

    def _replay(self, alert: NormalizedAlert) -> ExpertOutput:
        if self._fixture is None:
            if "outputs" in self.spec.params:
                self._fixture = dict(self.spec.params["outputs"])
            else:
                self._fixture = json.loads(Path(self.spec.params["path"]).read_text())
        stored = self._fixture.get(alert.alert_id)
        if stored is None:
            raise ExternalExpertFailure(f"{self.expert_id}: no stored output for {alert.alert_id}")
        try:
            return ExpertOutput.from_dict(stored)
        except (KeyError, TypeError, ValueError) as exc:
            raise ExternalExpertFailure(f"{self.expert_id}: bad stored output: {exc}") from exc

    def _external(self, alert: NormalizedAlert) -> ExpertOutput:
        pool = shared_pool(
            self.spec.params["command"],
            int(self.spec.params.get("processes", 1)),
            float(self.spec.params.get("timeout_s", DEFAULT_TIMEOUT_S)),
        )
        try:
            reply = pool.request({"id": alert.alert_id, "context": alert.to_dict()})
            return ExpertOutput.from_dict(reply)
        except ProtocolError as exc:
            raise ExternalExpertFailure(f"{self.expert_id}: {exc}") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise ExternalExpertFailure(f"{self.expert_id}: bad response: {exc}") from exc


def infer(alert: NormalizedAlert, expert: Expert) -> ExpertOutput:
    return expert.infer(alert)


class ExpertRegistry:
    """One expert per domain plus exactly one fallback.

    Categories no domain expert covers resolve to the fallback.
    """

    def __init__(self, specs: Sequence[ExpertSpec], label_table: Optional[LabelMapping] = None,
                 taxonomy: Taxonomy = Taxonomy()):
        fallbacks = [s for s in specs if s.domain == FALLBACK]
        if len(fallbacks) != 1:
            raise ExpertError("registry needs exactly one fallback expert")
        ids = [s.expert_id for s in specs]
        if len(set(ids)) != len(ids):
            raise ExpertError("duplicate expert ids")
        domains = [s.domain for s in specs]
        if len(set(domains)) != len(domains):
            raise ExpertError("more than one expert for a domain")
        self._by_category: Dict[str, str] = {}
        for s in specs:
            for cat in s.categories:
                if cat not in taxonomy.categories:
                    raise ExpertError(f"{s.expert_id} covers unknown category {cat!r}")
                if cat in self._by_category:
                    raise ExpertError(f"category {cat!r} covered twice")
                self._by_category[cat] = s.expert_id
        self.experts: Dict[str, Expert] = {s.expert_id: Expert(s, label_table, taxonomy) for s in specs}
        self.fallback_id = fallbacks[0].expert_id

    def expert_for(self, category: str) -> str:
        return self._by_category.get(category, self.fallback_id)

    def __getitem__(self, expert_id: str) -> Expert:
        return self.experts[expert_id]

    @property
    def fallback(self) -> Expert:
        return self.experts[self.fallback_id]


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def render_soar(
    output: ExpertOutput,
    decision: "RoutingDecision",
    alert_id: str,
    timings: Mapping[str, float],
) -> Dict[str, Any]:
    """The SOAR-facing document. Serialize with :func:`canonical_json`."""
    route_s = float(timings.get("route_s", decision.latency_s))
    expert_s = float(timings.get("expert_s", 0.0))
    return {
        "alert_id": alert_id,
        "reasoning": list(output.reasoning),
        "label": output.label.to_dict(),
        "confidence": output.confidence,
        "escalate": output.escalate,
        "routing": {
            "k_pred": decision.k_pred,
            "p_conf": decision.p_conf,
            "used_fallback": decision.used_fallback,
            "degraded": decision.degraded,
            "expert_id": decision.routed_expert,
        },
        "latency": {
            "route_s": route_s,
            "expert_s": expert_s,
            "total_s": float(timings.get("total_s", route_s + expert_s)),
        },
        "tokens": {
            "route": decision.response_tokens,
            "expert": sum(token_len(r) for r in output.reasoning),
        },
    }


def parse_soar(text: str) -> Tuple[ExpertOutput, Dict[str, Any]]:
    """Inverse of rendering: the expert output plus the remaining document fields."""
    doc = json.loads(text)
    out = ExpertOutput.from_dict(doc)
    rest = {k: v for k, v in doc.items() if k not in ("reasoning", "label", "confidence", "escalate")}
    return out, rest


_schema: Optional[Dict[str, Any]] = None


def soar_schema() -> Dict[str, Any]:
    global _schema
    if _schema is None:
        _schema = json.loads(resources.files("soctriage").joinpath("data/soar_schema.json").read_text())
    return _schema


def validate_soar(doc: Mapping[str, Any]) -> List[str]:
    import jsonschema

    validator = jsonschema.Draft202012Validator(soar_schema())
    return sorted(e.message for e in validator.iter_errors(doc))
