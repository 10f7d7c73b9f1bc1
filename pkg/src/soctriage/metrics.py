"""SOC triage metrics and robustness perturbations."""
from __future__ import annotations

import math
import random
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence

from .experts import stable_hash
from .ontology import DEGRADED_KEY, RISK_LEVELS, Label, NormalizationSchema, RawLog, alert_id_of

HIGH_RISK = ("High", "Critical")
CORRUPT_TOKEN = "<corrupt>"
PERTURBATIONS = ("truncate_fields", "drop_critical", "corrupt_tokens")


class IdMismatch(ValueError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    acc_risk: float
    acc_threat: float
    r_high: float
    fpr: float
    l_avg_s: float
    token_cost_rel: Optional[float]
    n: int
    confusion: Mapping[str, Mapping[str, int]] = field(default_factory=dict)
    mean_tokens: float = 0.0
    budget_violations: int = 0

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["confusion"] = {t: dict(row) for t, row in self.confusion.items()}
        return d

    def table(self) -> str:
        rows = [
            ("Acc_Risk", f"{self.acc_risk:.4f}"),
            ("Acc_Threat", f"{self.acc_threat:.4f}"),
            ("R_High", f"{self.r_high:.4f}"),
            ("FPR", f"{self.fpr:.4f}"),
            ("L_Avg (s)", f"{self.l_avg_s:.4f}"),
            ("Token cost (rel)", "n/a" if self.token_cost_rel is None else f"{self.token_cost_rel:.4f}"),
            ("N", str(self.n)),
        ]
        width = max(len(k) for k, _ in rows)
        lines = [f"{k.ljust(width)}  {v}" for k, v in rows]
        lines.append("")
        lines.append("truth\\pred " + " ".join(f"{p:>8}" for p in RISK_LEVELS))
        for t in RISK_LEVELS:
            row = self.confusion.get(t, {})
            lines.append(f"{t:<10} " + " ".join(f"{row.get(p, 0):>8}" for p in RISK_LEVELS))
        return "\n".join(lines)


def _soar(record) -> Mapping[str, Any]:
    if isinstance(record, Mapping):
        return record["soar"]
    return record.soar


def _alert_id(record) -> str:
    return record["alert_id"] if isinstance(record, Mapping) else record.alert_id


def evaluate(
    records: Sequence[Any],
    truth: Mapping[str, Label],
    baseline_tokens: Optional[float] = None,
) -> MetricsReport:
    """Accuracy, high-risk recall and false-positive rate against ``truth``.

    A false positive is a Low-truth alert predicted Medium, High or Critical.
    Threat accuracy compares (category, subtype).
    """
    ids = [_alert_id(r) for r in records]
    if len(set(ids)) != len(ids):
        raise IdMismatch("duplicate alert ids in records")
    if set(ids) != set(truth):
        missing = sorted(set(truth) - set(ids))[:3]
        extra = sorted(set(ids) - set(truth))[:3]
        raise IdMismatch(f"records and truth disagree (missing {missing}, unexpected {extra})")
    n = len(records)
    confusion = {t: {p: 0 for p in RISK_LEVELS} for t in RISK_LEVELS}
    risk_hits = threat_hits = high_tp = high_fn = fp = tn = violations = 0
    latencies: List[float] = []
    tokens: List[float] = []
    for rec in sorted(records, key=_alert_id):
        soar = _soar(rec)
        pred = Label.from_dict(soar["label"])
        true = truth[_alert_id(rec)]
        confusion.setdefault(true.risk_level, {}).setdefault(pred.risk_level, 0)
        confusion[true.risk_level][pred.risk_level] += 1
        risk_hits += pred.risk_level == true.risk_level
        threat_hits += (pred.category, pred.subtype) == (true.category, true.subtype)
        if true.risk_level in HIGH_RISK:
            if pred.risk_level in HIGH_RISK:
                high_tp += 1
            else:
                high_fn += 1
        elif true.risk_level == "Low":
            if pred.risk_level == "Low":
                tn += 1
            else:
                fp += 1
        latencies.append(float(soar["latency"]["total_s"]))
        tokens.append(float(soar["tokens"]["route"]) + float(soar["tokens"]["expert"]))
        budget_ok = rec["budget_ok"] if isinstance(rec, Mapping) else rec.budget_ok
        violations += not budget_ok
    mean_tokens = math.fsum(tokens) / n if n else 0.0
    rel = None
    if baseline_tokens:
        rel = mean_tokens / float(baseline_tokens)
    return MetricsReport(
        acc_risk=risk_hits / n if n else 0.0,
        acc_threat=threat_hits / n if n else 0.0,
        r_high=high_tp / (high_tp + high_fn) if high_tp + high_fn else 0.0,
        fpr=fp / (fp + tn) if fp + tn else 0.0,
        l_avg_s=math.fsum(latencies) / n if n else 0.0,
        token_cost_rel=rel,
        n=n,
        confusion=confusion,
        mean_tokens=mean_tokens,
        budget_violations=violations,
    )


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    p: float = 0.0
    k: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURBATIONS:
            raise ValueError(f"kind must be one of {PERTURBATIONS}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if self.k < 0:
            raise ValueError("k must be >= 0")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _classify_fields(raw: RawLog, schema: NormalizationSchema):
    """Split payload keys into critical (grouped by slot) and non-critical."""
    reserved = set(schema.reserved())
    by_slot: Dict[str, List[str]] = {}
    other: List[str] = []
    for key in sorted(raw.payload):
        if key.lower() in reserved:
            continue
        slot = schema.slot_of(key)
        if slot is not None:
            if raw.payload[key].strip():
                by_slot.setdefault(slot, []).append(key)
        else:
            other.append(key)
    return by_slot, other


def _perturb_one(raw: RawLog, spec: PerturbationSpec, schema: NormalizationSchema) -> RawLog:
    aid = alert_id_of(raw, schema)
    rng = random.Random(spec.seed ^ stable_hash(aid))
    payload = dict(raw.payload)
    by_slot, other = _classify_fields(raw, schema)
    if spec.kind == "truncate_fields":
        n = round_half_up(spec.p * len(other))
        for key in rng.sample(other, n):
            del payload[key]
    elif spec.kind == "drop_critical":
        slots = sorted(by_slot)
        rng.shuffle(slots)
        dropped = slots[: spec.k]
        for slot in dropped:
            for key in by_slot[slot]:
                del payload[key]
        if dropped:
            payload[DEGRADED_KEY] = "true"
    else:
        text_keys = by_slot.get("behavior", []) + other
        positions = [(k, i) for k in text_keys for i in range(len(payload[k].split()))]
        n = round_half_up(spec.p * len(positions))
        hit: Dict[str, set] = {}
        for k, i in rng.sample(positions, n):
            hit.setdefault(k, set()).add(i)
        for k, idx in hit.items():
            toks = payload[k].split()
            payload[k] = " ".join(CORRUPT_TOKEN if i in idx else t for i, t in enumerate(toks))
    # Pin the id so a perturbed alert still lines up with its ground truth.
    if not any(k.lower() == schema.id_field.lower() for k in payload):
        payload[schema.id_field] = aid
    return RawLog(raw.source, payload, raw.received_at)


def perturb(
    alerts: Sequence[RawLog],
    spec: PerturbationSpec,
    schema: NormalizationSchema = NormalizationSchema(),
) -> List[RawLog]:
    """Damage raw logs the way dirty SOC feeds do; deterministic in ``spec.seed``.

    ``drop_critical`` draws one seeded slot order per alert and removes its
    first ``k`` slots, so larger ``k`` always removes a superset.
    """
    if (spec.kind == "drop_critical" and spec.k == 0) or (spec.kind != "drop_critical" and spec.p == 0):
        return list(alerts)
    return [_perturb_one(a, spec, schema) for a in alerts]
