"""Log normalization and label harmonization.

Raw logs from EDR/IDS/firewall/cloud sources arrive as flat string maps. They
are projected onto a fixed set of critical slots (:func:`normalize`) and their
vendor labels are mapped onto the three-level taxonomy (:func:`map_label`).
"""
from __future__ import annotations

import hashlib
import ipaddress
import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple

SOURCES = ("edr", "ids", "firewall", "cloud_api", "web_app", "other")
RISK_LEVELS = ("Low", "Medium", "High", "Critical")
CATEGORIES = ("Malware", "Exploitation", "Reconnaissance", "Exfiltration", "DoS", "Other")

CRITICAL_SLOTS = (
    "src_ip",
    "dst_ip",
    "src_port",
    "dst_port",
    "protocol",
    "process",
    "file_hash",
    "behavior",
)
PORT_SLOTS = ("src_port", "dst_port")
IP_SLOTS = ("src_ip", "dst_ip")

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)

# Reserved payload key carrying an upstream degradation mark through serialization.
DEGRADED_KEY = "degraded_input"

DEFAULT_SUBTYPES: Dict[str, Tuple[str, ...]] = {
    "Malware": ("Trojan", "Ransomware", "Worm", "Backdoor", "Spyware"),
    "Exploitation": ("SQLInjection", "XSS", "CSRF", "RemoteCodeExecution", "PrivilegeEscalation"),
    "Reconnaissance": ("PortScan", "VulnerabilityScan", "Fuzzing"),
    "Exfiltration": ("DataTransfer", "DNSTunneling"),
    "DoS": ("Flood", "Amplification"),
    "Other": ("Unknown", "Suspicious", "APT"),
}

DEFAULT_ALIASES: Dict[str, str] = {
    "src_ip": "src_ip",
    "src": "src_ip",
    "source_ip": "src_ip",
    "sip": "src_ip",
    "dst_ip": "dst_ip",
    "dst": "dst_ip",
    "dest_ip": "dst_ip",
    "dip": "dst_ip",
    "src_port": "src_port",
    "sport": "src_port",
    "dst_port": "dst_port",
    "dport": "dst_port",
    "dest_port": "dst_port",
    "protocol": "protocol",
    "proto": "protocol",
    "process": "process",
    "proc": "process",
    "process_name": "process",
    "image": "process",
    "file_hash": "file_hash",
    "sha256": "file_hash",
    "sha1": "file_hash",
    "md5": "file_hash",
    "hash": "file_hash",
    "behavior": "behavior",
    "behaviour": "behavior",
    "msg": "behavior",
    "message": "behavior",
}


class OntologyError(ValueError):
    pass


class MissingLabel(OntologyError):
    """No mapping entry matched and the table has no default."""


class MalformedField(OntologyError):
    pass


@dataclass(frozen=True)
class RawLog:
    source: str
    payload: Dict[str, str]
    received_at: datetime = EPOCH

    def __post_init__(self):
        if self.source not in SOURCES:
            raise OntologyError(f"unknown source {self.source!r}")
        if not self.payload:
            raise OntologyError("payload must be non-empty")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RawLog":
        payload = d.get("payload")
        if not isinstance(payload, Mapping):
            raise OntologyError("payload must be an object")
        flat = {str(k): _flatten_value(v) for k, v in payload.items()}
        return cls(
            source=d.get("source", "other"),
            payload=flat,
            received_at=parse_timestamp(d.get("received_at")),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "source": self.source,
            "payload": dict(self.payload),
            "received_at": format_timestamp(self.received_at),
        }


def _flatten_value(v: Any) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return ""
    if isinstance(v, (int, float)):
        return str(v)
    return json.dumps(v, sort_keys=True)


def parse_timestamp(value: Any) -> datetime:
    if value is None:
        return EPOCH
    if isinstance(value, datetime):
        return value.astimezone(timezone.utc)
    if isinstance(value, (int, float)):
        return datetime.fromtimestamp(value / 1000.0, tz=timezone.utc)
    text = str(value).strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(text)
    except ValueError as exc:
        raise OntologyError(f"bad timestamp {value!r}") from exc
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    ts = ts.astimezone(timezone.utc)
    return ts.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ts.microsecond // 1000:03d}Z"


@dataclass(frozen=True)
class NormalizedAlert:
    alert_id: str
    src_ip: Optional[str] = None
    dst_ip: Optional[str] = None
    src_port: Optional[int] = None
    dst_port: Optional[int] = None
    protocol: Optional[str] = None
    process: Optional[str] = None
    file_hash: Optional[str] = None
    behavior: Optional[str] = None
    extra: Dict[str, str] = field(default_factory=dict)
    raw_label: Optional[str] = None
    degraded_input: bool = False

    def __post_init__(self):
        for slot in PORT_SLOTS:
            port = getattr(self, slot)
            if port is not None and not 0 <= port <= 65535:
                raise OntologyError(f"{slot} out of range: {port}")
        if not self.present_slots() and not self.degraded_input:
            raise OntologyError("alert with no critical field must be flagged degraded_input")

    def present_slots(self) -> List[str]:
        return [s for s in CRITICAL_SLOTS if getattr(self, s) is not None]

    def text(self) -> str:
        """Free text the keyword heuristics look at: behavior, process and extras."""
        parts = [self.behavior or "", self.process or ""]
        parts.extend(self.extra[k] for k in sorted(self.extra))
        return " ".join(p for p in parts if p)

    def to_dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {"alert_id": self.alert_id}
        for slot in CRITICAL_SLOTS:
            value = getattr(self, slot)
            if value is not None:
                d[slot] = value
        if self.extra:
            d["extra"] = dict(sorted(self.extra.items()))
        if self.raw_label is not None:
            d["raw_label"] = self.raw_label
        d["degraded_input"] = self.degraded_input
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "NormalizedAlert":
        kwargs: Dict[str, Any] = {"alert_id": str(d["alert_id"])}
        for slot in CRITICAL_SLOTS:
            if d.get(slot) is not None:
                kwargs[slot] = d[slot]
        kwargs["extra"] = {str(k): str(v) for k, v in (d.get("extra") or {}).items()}
        kwargs["raw_label"] = d.get("raw_label")
        kwargs["degraded_input"] = bool(d.get("degraded_input", False))
        return cls(**kwargs)


@dataclass(frozen=True)
class Label:
    risk_level: str
    category: str
    subtype: str

    def to_dict(self) -> Dict[str, str]:
        return {"risk_level": self.risk_level, "category": self.category, "subtype": self.subtype}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Label":
        return cls(str(d["risk_level"]), str(d["category"]), str(d["subtype"]))

    def canonical(self) -> str:
        return f"{self.risk_level}/{self.category}/{self.subtype}"


@dataclass(frozen=True)
class Taxonomy:
    """Closed label sets. ``subtypes`` maps each category to its declared subtypes."""

    risk_levels: Tuple[str, ...] = RISK_LEVELS
    categories: Tuple[str, ...] = CATEGORIES
    subtypes: Mapping[str, Tuple[str, ...]] = field(default_factory=lambda: dict(DEFAULT_SUBTYPES))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Taxonomy":
        subtypes = {str(c): tuple(v) for c, v in (d.get("subtypes") or DEFAULT_SUBTYPES).items()}
        categories = tuple(d.get("categories") or subtypes.keys())
        return cls(
            risk_levels=tuple(d.get("risk_levels") or RISK_LEVELS),
            categories=categories,
            subtypes=subtypes,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "risk_levels": list(self.risk_levels),
            "categories": list(self.categories),
            "subtypes": {c: list(self.subtypes.get(c, ())) for c in self.categories},
        }

    def category_of(self, subtype: str) -> List[str]:
        return [c for c in self.categories if subtype in self.subtypes.get(c, ())]


def validate_label(label: Label, taxonomy: Taxonomy) -> List[str]:
    """Return a list of violations; empty means the label is valid."""
    violations = []
    if label.risk_level not in taxonomy.risk_levels:
        violations.append(f"unknown risk level {label.risk_level!r}")
    if label.category not in taxonomy.categories:
        violations.append(f"unknown category {label.category!r}")
    owners = taxonomy.category_of(label.subtype)
    if not owners:
        violations.append(f"unknown subtype {label.subtype!r}")
    elif label.category in taxonomy.categories and label.category not in owners:
        violations.append(
            f"subtype-category mismatch: {label.subtype!r} is declared under {', '.join(owners)}, "
            f"not {label.category!r}"
        )
    return violations


def _glob_regex(pattern: str) -> "re.Pattern[str]":
    out = []
    for ch in pattern:
        if ch == "*":
            out.append(".*")
        elif ch == "?":
            out.append(".")
        else:
            out.append(re.escape(ch))
    return re.compile("".join(out), re.IGNORECASE | re.DOTALL)


@dataclass(frozen=True)
class LabelMapping:
    entries: Tuple[Tuple[str, Label], ...]
    default: Optional[Label] = None

    def __post_init__(self):
        object.__setattr__(
            self, "_compiled", tuple(_glob_regex(p) for p, _ in self.entries)
        )

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "LabelMapping":
        entries = tuple(
            (str(e["pattern"]), Label.from_dict(e["label"])) for e in d.get("entries", ())
        )
        default = Label.from_dict(d["default"]) if d.get("default") else None
        if d.get("include_canonical", False):
            entries = canonical_entries(Taxonomy.from_dict(d.get("taxonomy") or {})) + entries
        return cls(entries, default)

    def to_dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {
            "entries": [{"pattern": p, "label": lab.to_dict()} for p, lab in self.entries]
        }
        if self.default is not None:
            d["default"] = self.default.to_dict()
        return d

    def validate(self, taxonomy: Taxonomy) -> List[str]:
        problems = []
        for pattern, label in self.entries:
            problems.extend(f"{pattern}: {v}" for v in validate_label(label, taxonomy))
        if self.default is not None:
            problems.extend(f"default: {v}" for v in validate_label(self.default, taxonomy))
        return problems


def canonical_entries(taxonomy: Taxonomy) -> Tuple[Tuple[str, Label], ...]:
    """Entries matching the canonical ``Risk/Category/Subtype`` spelling of every label."""
    out = []
    for risk in taxonomy.risk_levels:
        for cat in taxonomy.categories:
            for sub in taxonomy.subtypes.get(cat, ()):
                label = Label(risk, cat, sub)
                out.append((label.canonical(), label))
    return tuple(out)


def default_label_mapping(taxonomy: Optional[Taxonomy] = None) -> LabelMapping:
    vendor = (
        ("Trojan.*", Label("High", "Malware", "Trojan")),
        ("Ransom*", Label("Critical", "Malware", "Ransomware")),
        ("Worm.*", Label("High", "Malware", "Worm")),
        ("*SQL*Injection*", Label("High", "Exploitation", "SQLInjection")),
        ("*XSS*", Label("Medium", "Exploitation", "XSS")),
        ("*CSRF*", Label("Medium", "Exploitation", "CSRF")),
        ("*port?scan*", Label("Low", "Reconnaissance", "PortScan")),
    )
    return LabelMapping(
        canonical_entries(taxonomy or Taxonomy()) + vendor,
        default=Label("Low", "Other", "Unknown"),
    )


def map_label(raw_label: str, table: LabelMapping) -> Label:
    for regex, (_, label) in zip(table._compiled, table.entries):  # type: ignore[attr-defined]
        if regex.fullmatch(raw_label):
            return label
    if table.default is not None:
        return table.default
    raise MissingLabel(f"no mapping for raw label {raw_label!r}")


@dataclass(frozen=True)
class NormalizationSchema:
    """Field selection for :func:`normalize`.

    ``aliases`` maps lowercase raw field names onto critical slots; when several
    aliases of one slot are present, the earliest alias in declaration order wins.
    Raw fields listed in ``extra_fields`` are copied into ``extra`` only when
    ``keep_extra`` is set. Anything else is dropped.
    """

    aliases: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_ALIASES))
    extra_fields: Tuple[str, ...] = ()
    keep_extra: bool = False
    id_field: str = "alert_id"
    label_field: str = "label"
    min_critical: int = 1

    def __post_init__(self):
        bad = sorted(set(self.aliases.values()) - set(CRITICAL_SLOTS))
        if bad:
            raise OntologyError(f"aliases target unknown slots: {bad}")
        clash = set(self.extra_fields) & set(self.aliases)
        if clash:
            raise OntologyError(f"extra_fields overlap critical aliases: {sorted(clash)}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "NormalizationSchema":
        aliases = dict(DEFAULT_ALIASES)
        if "aliases" in d:
            aliases = {str(k).lower(): str(v) for k, v in d["aliases"].items()}
        return cls(
            aliases=aliases,
            extra_fields=tuple(str(f).lower() for f in d.get("extra_fields", ())),
            keep_extra=bool(d.get("keep_extra", False)),
            id_field=d.get("id_field", "alert_id"),
            label_field=d.get("label_field", "label"),
            min_critical=int(d.get("min_critical", 1)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "aliases": dict(self.aliases),
            "extra_fields": list(self.extra_fields),
            "keep_extra": self.keep_extra,
            "id_field": self.id_field,
            "label_field": self.label_field,
            "min_critical": self.min_critical,
        }

    def reserved(self) -> Tuple[str, ...]:
        return (self.id_field.lower(), self.label_field.lower(), DEGRADED_KEY)

    def slot_of(self, raw_name: str) -> Optional[str]:
        return self.aliases.get(raw_name.lower())


def derive_alert_id(raw: RawLog) -> str:
    blob = json.dumps(raw.to_dict(), sort_keys=True, separators=(",", ":"))
    return "a-" + hashlib.sha256(blob.encode()).hexdigest()[:16]


def alert_id_of(raw: RawLog, schema: NormalizationSchema) -> str:
    lowered = {k.lower(): v for k, v in raw.payload.items()}
    given = lowered.get(schema.id_field.lower(), "").strip()
    return given or derive_alert_id(raw)


def _parse_slot(slot: str, value: str):
    if slot in PORT_SLOTS:
        try:
            port = int(value)
        except ValueError as exc:
            raise MalformedField(f"{slot}={value!r}") from exc
        if not 0 <= port <= 65535:
            raise MalformedField(f"{slot}={value!r} out of range")
        return port
    if slot in IP_SLOTS:
        try:
            return str(ipaddress.ip_address(value))
        except ValueError as exc:
            raise MalformedField(f"{slot}={value!r}") from exc
    return value


def normalize(raw: RawLog, schema: NormalizationSchema) -> NormalizedAlert:
    """Project a raw log onto the critical slots.

    Unparseable ports and IPs are omitted and the alert is flagged
    ``degraded_input`` instead of raising.
    """
    lowered: Dict[str, str] = {}
    for key in sorted(raw.payload):
        lowered.setdefault(key.lower(), raw.payload[key])

    slots: Dict[str, Any] = {}
    degraded = lowered.get(DEGRADED_KEY, "").strip().lower() == "true"
    seen_malformed = set()
    for alias, slot in schema.aliases.items():
        if slot in slots or slot in seen_malformed or alias not in lowered:
            continue
        value = lowered[alias].strip()
        if not value:
            continue
        try:
            slots[slot] = _parse_slot(slot, value)
        except MalformedField:
            seen_malformed.add(slot)
            degraded = True

    extra: Dict[str, str] = {}
    if schema.keep_extra:
        for name in schema.extra_fields:
            if name in lowered and lowered[name].strip():
                extra[name] = lowered[name]

    raw_label = lowered.get(schema.label_field.lower())
    if raw_label is not None and not raw_label.strip():
        raw_label = None
    if len(slots) < max(1, schema.min_critical):
        degraded = True
    return NormalizedAlert(
        alert_id=alert_id_of(raw, schema),
        extra=extra,
        raw_label=raw_label,
        degraded_input=degraded,
        **slots,
    )


def alert_to_payload(alert: NormalizedAlert, schema: NormalizationSchema) -> Dict[str, str]:
    """Flatten a normalized alert back into a payload that :func:`normalize` accepts."""
    payload: Dict[str, str] = {schema.id_field: alert.alert_id}
    for slot in CRITICAL_SLOTS:
        value = getattr(alert, slot)
        if value is not None:
            payload[slot] = str(value)
    payload.update(alert.extra)
    if alert.raw_label is not None:
        payload[schema.label_field] = alert.raw_label
    if alert.degraded_input:
        payload[DEGRADED_KEY] = "true"
    return payload


def load_raw_logs(lines: Iterable[str]) -> Iterable[Tuple[int, Optional[RawLog], Optional[str]]]:
    """Yield ``(line_no, raw_log, error)`` for each non-blank JSONL line.

    Lines may be bare RawLog objects or corpus records carrying one under ``raw``.
    """
    for no, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if isinstance(obj, dict) and "raw" in obj and "payload" not in obj:
                obj = obj["raw"]
            yield no, RawLog.from_dict(obj), None
        except (ValueError, KeyError, TypeError, OntologyError) as exc:
            yield no, None, f"line {no}: {exc}"

