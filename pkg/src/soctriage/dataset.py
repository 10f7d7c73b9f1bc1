"""Training-tuple construction, domain partitioning, stratified splits and
synthetic corpora."""
from __future__ import annotations

import hashlib
import json
import random
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from fractions import Fraction
from importlib import resources
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .compression import (
    CompressedChain,
    CompressionConfig,
    FidelityEvaluatorSpec,
    check_fidelity,
    compress,
)
from .ontology import (
    CATEGORIES,
    RISK_LEVELS,
    Label,
    NormalizedAlert,
    RawLog,
    Taxonomy,
)
from .relevance import ReasoningChain, RelevanceVector, information_density

ATTACK_LOG_CATEGORY_MIX = {
    "Malware": 0.25,
    "Exploitation": 0.35,
    "Reconnaissance": 0.20,
    "Exfiltration": 0.10,
    "Other": 0.10,
}
RISK_INFORMATION_RISK_MIX = {"Low": 0.65, "Medium": 0.25, "High": 0.10}
ATTACK_LOG_RISK_MIX = {"Low": 0.30, "Medium": 0.30, "High": 0.25, "Critical": 0.15}

PRESETS = {
    "attack_log": (ATTACK_LOG_CATEGORY_MIX, ATTACK_LOG_RISK_MIX),
    "risk_information": ({"Exploitation": 1.0}, RISK_INFORMATION_RISK_MIX),
}

PAPER_DOMAINS = {
    "web_intrusion": ["Exploitation/SQLInjection", "Exploitation/XSS", "Exploitation/CSRF"],
    "attack_use": ["Exploitation"],
    "malicious_software": ["Malware"],
    "other": ["Reconnaissance", "DoS", "Exfiltration", "Other"],
}

_INNER_TERMINATOR = re.compile(r"[.!?]\s+\S")


class DatasetError(ValueError):
    pass


class EmptyReasoning(DatasetError):
    """Compression kept no step, so there is nothing to train on."""


class MultiSentenceStep(DatasetError):
    pass


@dataclass(frozen=True)
class TrainingTuple:
    alert: NormalizedAlert
    compressed: CompressedChain
    label: Label
    provenance: Mapping[str, str] = field(default_factory=dict)

    @property
    def tuple_id(self) -> str:
        return self.alert.alert_id

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.tuple_id,
            "alert": self.alert.to_dict(),
            "compressed": self.compressed.to_dict(),
            "label": self.label.to_dict(),
            "provenance": dict(self.provenance),
        }


def _density(rel: float, length: int, eps: float) -> Fraction:
    return Fraction(rel) / (Fraction(length) + Fraction(eps))


def build_tuple(
    alert: NormalizedAlert,
    full_chain: ReasoningChain,
    rel: RelevanceVector,
    label: Label,
    cfg: CompressionConfig = CompressionConfig(),
    fid: FidelityEvaluatorSpec = FidelityEvaluatorSpec(),
    max_bullets: int = 5,
) -> TrainingTuple:
    if not full_chain.steps:
        raise DatasetError("full chain has no steps")
    out = compress(full_chain, rel, alert, label, cfg, fid)
    if not out.selected:
        raise EmptyReasoning(f"no step of {alert.alert_id} fits the {cfg.delta_token}-token budget")
    if len(out.selected) > max_bullets:
        keep = sorted(
            out.selected,
            key=lambda j: (-_density(rel.scores[j], full_chain.steps[j].token_len, cfg.epsilon_smooth), j),
        )[:max_bullets]
        keep.sort()
        steps = tuple(full_chain.steps[j] for j in keep)
        trimmed = CompressedChain(
            tuple(keep),
            steps,
            information_density(steps, [rel.scores[j] for j in keep], cfg.epsilon_smooth),
            out.fidelity,
            out.repair_applied,
        )
        report = check_fidelity(alert, label, full_chain, trimmed, rel, fid, cfg.epsilon_fidelity)
        out = CompressedChain(trimmed.selected, trimmed.steps, trimmed.density, report, trimmed.repair_applied)
    for step in out.steps:
        if _INNER_TERMINATOR.search(step.text.strip()):
            raise MultiSentenceStep(f"step is not a single sentence: {step.text!r}")
    provenance = {"scorer_id": rel.scorer_id, "cfg": cfg.digest()}
    if rel.aggregation:
        provenance["aggregation"] = rel.aggregation
    return TrainingTuple(alert, out, label, provenance)


@dataclass(frozen=True)
class DomainPartition:
    domains: Mapping[str, Tuple[str, ...]]
    catch_all_id: str
    undersized: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "domains": {k: list(v) for k, v in sorted(self.domains.items())},
            "catch_all_id": self.catch_all_id,
            "undersized": list(self.undersized),
            "sizes": {k: len(v) for k, v in sorted(self.domains.items())},
        }


def _co_occurrence(labels_by_cat: Mapping[str, List[Label]], cat: str, members: Sequence[str]) -> int:
    """Tuples of ``cat`` whose subtype also occurs among the catch-all members."""
    pool = {lab.subtype for m in members for lab in labels_by_cat.get(m, ())}
    return sum(1 for lab in labels_by_cat.get(cat, ()) if lab.subtype in pool)


def partition(
    corpus: Sequence[Tuple[str, Label]],
    min_samples: int = 500,
    k_max: Optional[int] = None,
    catch_all_id: str = "other",
    pinned: Optional[Mapping[str, Sequence[str]]] = None,
) -> DomainPartition:
    """Split ``(id, label)`` pairs into disjoint domains.

    Each category with at least ``min_samples`` items gets its own domain; the
    rest go to the catch-all. When ``k_max`` caps the domain count, surviving
    domains are folded into the catch-all in order of label co-occurrence with
    its members (ties by name). ``pinned`` bypasses the rule with an explicit
    ``domain -> [Category or Category/Subtype]`` table; first matching domain wins.
    """
    if pinned is not None:
        return _pinned_partition(corpus, pinned, catch_all_id, min_samples)

    ids_by_cat: Dict[str, List[str]] = defaultdict(list)
    labels_by_cat: Dict[str, List[Label]] = defaultdict(list)
    for tid, label in corpus:
        ids_by_cat[label.category].append(tid)
        labels_by_cat[label.category].append(label)

    own = sorted(c for c, ids in ids_by_cat.items() if len(ids) >= min_samples)
    merged = sorted(c for c in ids_by_cat if c not in own)
    if k_max is not None:
        if k_max < 1:
            raise DatasetError("k_max must be >= 1")
        while len(own) + 1 > k_max and own:
            victim = min(own, key=lambda c: (-_co_occurrence(labels_by_cat, c, merged), c))
            own.remove(victim)
            merged.append(victim)

    domains: Dict[str, Tuple[str, ...]] = {c: tuple(ids_by_cat[c]) for c in own}
    if catch_all_id in domains:
        raise DatasetError(f"catch-all id {catch_all_id!r} collides with a category domain")
    domains[catch_all_id] = tuple(tid for c in merged for tid in ids_by_cat[c])
    undersized = (catch_all_id,) if len(domains[catch_all_id]) < min_samples else ()
    return DomainPartition(domains, catch_all_id, undersized)


def _pinned_partition(corpus, pinned, catch_all_id, min_samples) -> DomainPartition:
    domains: Dict[str, List[str]] = {d: [] for d in pinned}
    domains.setdefault(catch_all_id, [])
    for tid, label in corpus:
        target = catch_all_id
        for dom, selectors in pinned.items():
            if any(s in (label.category, f"{label.category}/{label.subtype}") for s in selectors):
                target = dom
                break
        domains[target].append(tid)
    undersized = tuple(sorted(d for d, ids in domains.items() if len(ids) < min_samples))
    return DomainPartition({d: tuple(v) for d, v in domains.items()}, catch_all_id, undersized)


@dataclass(frozen=True)
class SplitSpec:
    ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise DatasetError("ratios must be three non-negative numbers")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise DatasetError("ratios must sum to 1")


def _fraction(x: float) -> Fraction:
    # Decimal spelling, so 0.35 is 7/20 rather than its binary neighbour.
    return Fraction(repr(float(x)))


def largest_remainder(total: int, weights: Mapping[str, float]) -> Dict[str, int]:
    """Integer counts summing to ``total``, each the floor or ceiling of its exact share.

    Leftover units go to the largest fractional remainders, ties broken by key name.
    """
    shares = {k: _fraction(w) for k, w in weights.items()}
    norm = sum(shares.values())
    if norm == 0:
        raise DatasetError("weights sum to zero")
    exact = {k: v * total / norm for k, v in shares.items()}
    counts = {k: int(v) for k, v in exact.items()}
    left = total - sum(counts.values())
    order = sorted(weights, key=lambda k: (-(exact[k] - counts[k]), k))
    for k in order[:left]:
        counts[k] += 1
    return counts


def _controlled_round(strata_sizes: Sequence[int], ratios: Sequence[float]) -> List[List[int]]:
    """Round the stratum x split table so cells, stratum totals and split totals
    are all floors or ceilings of their exact values."""
    keys = [str(i) for i in range(len(ratios))]
    targets = largest_remainder(sum(strata_sizes), dict(zip(keys, ratios)))
    norm = sum(_fraction(r) for r in ratios)
    fr = [_fraction(r) / norm for r in ratios]
    table, frac = [], []
    for m in strata_sizes:
        exact = [m * f for f in fr]
        base = [int(x) for x in exact]
        table.append(base)
        frac.append([x - b for x, b in zip(exact, base)])
    need_col = [targets[k] - sum(row[i] for row in table) for i, k in enumerate(keys)]
    need_row = [m - sum(row) for m, row in zip(strata_sizes, table)]
    # Each leftover unit goes to a cell with a fractional part, so cells stay
    # within floor/ceiling; a feasible assignment always exists and is found
    # by augmenting paths (stratum -> cell -> split).
    owner: Dict[Tuple[int, int], bool] = {}

    def augment(s: int, seen: set) -> bool:
        for i in sorted(range(len(ratios)), key=lambda i: (-frac[s][i], i)):
            if frac[s][i] == 0 or owner.get((s, i)) or i in seen:
                continue
            seen.add(i)
            if need_col[i] > 0:
                need_col[i] -= 1
                owner[(s, i)] = True
                return True
            # Split i is full: try moving one of its units to another split.
            for t in range(len(strata_sizes)):
                if owner.get((t, i)) and augment_from(t, i, seen):
                    owner[(s, i)] = True
                    return True
        return False

    def augment_from(t: int, i: int, seen: set) -> bool:
        owner[(t, i)] = False
        if augment(t, seen):
            return True
        owner[(t, i)] = True
        return False

    for s in range(len(strata_sizes)):
        for _ in range(need_row[s]):
            if not augment(s, set()):
                raise AssertionError("controlled rounding failed")  # unreachable for valid input
    for (s, i), taken in owner.items():
        if taken:
            table[s][i] += 1
    return table


def _seed_for(seed: int, key: str) -> int:
    digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def split(
    items: Sequence[Tuple[str, Label]],
    spec: SplitSpec,
) -> Tuple[List[str], List[str], List[str]]:
    """Stratified by (risk level, category); deterministic in ``spec.seed``."""
    strata: Dict[Tuple[str, str], List[str]] = defaultdict(list)
    for tid, label in items:
        strata[(label.risk_level, label.category)].append(tid)
    keys = sorted(strata)
    table = _controlled_round([len(strata[k]) for k in keys], spec.ratios)
    out: Tuple[List[str], List[str], List[str]] = ([], [], [])
    for key, counts in zip(keys, table):
        ids = sorted(strata[key])
        random.Random(_seed_for(spec.seed, "/".join(key))).shuffle(ids)
        start = 0
        for bucket, c in zip(out, counts):
            bucket.extend(ids[start:start + c])
            start += c
    return out


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 1000
    category_mix: Mapping[str, float] = field(default_factory=lambda: dict(ATTACK_LOG_CATEGORY_MIX))
    risk_mix: Mapping[str, float] = field(default_factory=lambda: dict(ATTACK_LOG_RISK_MIX))
    seed: int = 0

    def __post_init__(self):
        if self.n < 0:
            raise DatasetError("n must be >= 0")
        for name, mix in (("category_mix", self.category_mix), ("risk_mix", self.risk_mix)):
            if abs(sum(mix.values()) - 1.0) > 1e-9 or any(v < 0 for v in mix.values()):
                raise DatasetError(f"{name} must be non-negative and sum to 1")
        for c in self.category_mix:
            if c not in CATEGORIES:
                raise DatasetError(f"unknown category {c!r}")
        for r in self.risk_mix:
            if r not in RISK_LEVELS:
                raise DatasetError(f"unknown risk level {r!r}")

    @classmethod
    def preset(cls, name: str, n: int, seed: int = 0) -> "SyntheticSpec":
        cats, risks = PRESETS[name]
        return cls(n, dict(cats), dict(risks), seed)


@dataclass(frozen=True)
class SyntheticRecord:
    raw: RawLog
    label: Label
    chain: ReasoningChain

    @property
    def record_id(self) -> str:
        return self.raw.payload["alert_id"]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.record_id,
            "raw": self.raw.to_dict(),
            "label": self.label.to_dict(),
            "chain": self.chain.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SyntheticRecord":
        return cls(RawLog.from_dict(d["raw"]), Label.from_dict(d["label"]), ReasoningChain.from_dict(d["chain"]))


_templates: Optional[Dict[str, Any]] = None


def templates() -> Dict[str, Any]:
    global _templates
    if _templates is None:
        text = resources.files("soctriage").joinpath("data/templates.json").read_text()
        _templates = json.loads(text)
    return _templates


def _ip(rng: random.Random, internal: bool) -> str:
    if internal:
        return f"10.{rng.randrange(256)}.{rng.randrange(256)}.{rng.randrange(1, 255)}"
    return f"{rng.choice((45, 91, 185, 203))}.{rng.randrange(256)}.{rng.randrange(256)}.{rng.randrange(1, 255)}"


def _make_chain(rng: random.Random, category: str, fields: Mapping[str, str], chain_id: str) -> ReasoningChain:
    t = templates()
    n = rng.randint(10, 15)
    k = rng.randint(3, 5)
    evidence = rng.sample(t["evidence"][category], min(k, len(t["evidence"][category])))
    filler = rng.sample(t["filler"], n - len(evidence))
    steps = [e.format(**fields) for e in evidence] + filler
    rng.shuffle(steps)
    return ReasoningChain.from_texts(steps, chain_id)


def generate_synthetic(
    spec: SyntheticSpec,
    taxonomy: Taxonomy = Taxonomy(),
    shard: int = 0,
) -> List[SyntheticRecord]:
    """Labeled raw logs with templated 10-15 step reasoning chains.

    Category and risk counts are exact largest-remainder roundings of
    ``n * fraction``; which alert gets which risk level is a seeded shuffle.
    """
    if spec.n == 0:
        return []
    rng = random.Random(spec.seed ^ shard)
    cat_counts = largest_remainder(spec.n, spec.category_mix)
    risk_counts = largest_remainder(spec.n, spec.risk_mix)
    cats = [c for c in sorted(cat_counts) for _ in range(cat_counts[c])]
    risks = [r for r in sorted(risk_counts) for _ in range(risk_counts[r])]
    rng.shuffle(cats)
    rng.shuffle(risks)

    t = templates()
    base = datetime(2024, 1, 1, tzinfo=timezone.utc)
    out = []
    for i, (cat, risk) in enumerate(zip(cats, risks)):
        subtype = rng.choice(list(taxonomy.subtypes[cat]))
        label = Label(risk, cat, subtype)
        aid = f"syn-{spec.seed}-{shard}-{i:06d}"
        fields = {
            "src_ip": _ip(rng, internal=cat != "Reconnaissance"),
            "dst_ip": _ip(rng, internal=cat in ("Reconnaissance", "DoS")),
            "dst_port": str(rng.choice((22, 80, 443, 445, 3389, 8080, 53))),
            "proto": rng.choice(t["protocol"][cat]),
            "proc": rng.choice(t["process"][cat]),
            "hash": hashlib.sha256(aid.encode()).hexdigest(),
        }
        payload = {
            "alert_id": aid,
            "src": fields["src_ip"],
            "dst": fields["dst_ip"],
            "sport": str(rng.randrange(1024, 65536)),
            "dport": fields["dst_port"],
            "proto": fields["proto"],
            "proc": fields["proc"],
            "sha256": fields["hash"],
            "behavior": rng.choice(t["behavior"][cat]),
            "label": label.canonical(),
            "sensor": f"sensor-{rng.randrange(1, 20):02d}",
            "host": f"host-{rng.randrange(1000):04d}",
            "user": rng.choice(("svc_backup", "jdoe", "admin", "asmith")),
            "rule_name": f"rule {rng.randrange(100, 999)} {cat.lower()} detection",
        }
        raw = RawLog(t["source"][cat], payload, base + timedelta(seconds=i))
        out.append(SyntheticRecord(raw, label, _make_chain(rng, cat, fields, aid)))
    return out


def category_counts(records: Iterable[SyntheticRecord]) -> Dict[str, int]:
    return dict(Counter(r.label.category for r in records))


def risk_counts(records: Iterable[SyntheticRecord]) -> Dict[str, int]:
    return dict(Counter(r.label.risk_level for r in records))
