"""Per-step relevance scoring and information density.

Relevance in the original method is the gradient norm of the label
log-likelihood with respect to each step's token embeddings. Here it comes
from a pluggable scorer: a keyword weight table, a stored fixture, or an
external process speaking the line protocol in :mod:`soctriage.protocol`.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence

from .ontology import Label, NormalizedAlert
from .protocol import DEFAULT_TIMEOUT_S, ProtocolError, shared_pool

DEFAULT_EPSILON_SMOOTH = 1.0

_WORD = re.compile(r"[a-z0-9]+(?:[._-][a-z0-9]+)*")


class RelevanceError(ValueError):
    pass


class ExternalScorerFailure(RuntimeError):
    pass


def token_len(text: str) -> int:
    """Whitespace token count; the length proxy used for every budget."""
    return len(text.split())


def words(text: str) -> List[str]:
    return _WORD.findall(text.lower())


@dataclass(frozen=True)
class ReasoningStep:
    text: str
    token_len: int = -1

    def __post_init__(self):
        if self.token_len < 0:
            object.__setattr__(self, "token_len", token_len(self.text))
        if self.token_len < 1:
            raise RelevanceError(f"step has no tokens: {self.text!r}")


@dataclass(frozen=True)
class ReasoningChain:
    steps: tuple
    chain_id: str = ""

    @classmethod
    def from_texts(cls, texts: Sequence[str], chain_id: str = "") -> "ReasoningChain":
        return cls(tuple(ReasoningStep(t) for t in texts), chain_id)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ReasoningChain":
        steps = []
        for s in d["steps"]:
            if isinstance(s, str):
                steps.append(ReasoningStep(s))
            else:
                steps.append(ReasoningStep(s["text"], int(s.get("token_len", -1))))
        return cls(tuple(steps), str(d.get("id", d.get("chain_id", ""))))

    def to_dict(self) -> Dict[str, Any]:
        return {"id": self.chain_id, "steps": [s.text for s in self.steps]}

    @property
    def total_len(self) -> int:
        return sum(s.token_len for s in self.steps)

    def __len__(self):
        return len(self.steps)


@dataclass(frozen=True)
class RelevanceVector:
    scores: tuple
    scorer_id: str = ""
    aggregation: str = ""

    def __post_init__(self):
        for s in self.scores:
            if not math.isfinite(s) or s < 0:
                raise RelevanceError(f"relevance scores must be finite and >= 0, got {s!r}")

    def __len__(self):
        return len(self.scores)


DEFAULT_KEYWORD_WEIGHTS: Dict[str, float] = {
    "ransomware": 5, "encrypted": 3, "trojan": 4, "worm": 4, "backdoor": 4,
    "beacon": 3, "c2": 4, "payload": 2, "malicious": 2, "mimikatz.exe": 5,
    "credential": 3, "injection": 4, "sql": 3, "xss": 4, "csrf": 4, "exploit": 4,
    "shellcode": 4, "escalation": 3, "scan": 3, "probe": 2, "sweep": 3, "enumeration": 2,
    "exfiltration": 5, "outbound": 2, "upload": 2, "tunneling": 4, "dns": 1,
    "flood": 4, "amplification": 4, "syn": 2, "persistence": 3, "lateral": 3,
    "hash": 1, "signature": 2, "suspicious": 1, "anomalous": 2,
}


@dataclass(frozen=True)
class ScorerSpec:
    kind: str = "keyword"
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("keyword", "fixture", "external"):
            raise RelevanceError(f"unknown scorer kind {self.kind!r}")
        if self.kind == "keyword":
            for w, v in self.weights().items():
                if not v >= 0:
                    raise RelevanceError(f"keyword weight for {w!r} must be >= 0")
        if self.kind == "external" and not self.params.get("command"):
            raise RelevanceError("external scorer needs a command")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScorerSpec":
        return cls(d.get("kind", "keyword"), dict(d.get("params") or {}))

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "params": dict(self.params)}

    def weights(self) -> Dict[str, float]:
        table = self.params.get("weights")
        if table is None:
            table = DEFAULT_KEYWORD_WEIGHTS
        return {str(k).lower(): float(v) for k, v in table.items()}

    @property
    def scorer_id(self) -> str:
        if self.kind == "external":
            return f"external:{self.params['command']}"
        if self.kind == "fixture":
            return f"fixture:{self.params.get('path', 'inline')}"
        return "keyword"


def keyword_score(text: str, weights: Mapping[str, float]) -> float:
    return math.fsum(weights.get(w, 0.0) for w in words(text))


_fixture_cache: Dict[str, Dict[str, List[float]]] = {}


def _fixture_table(params: Mapping[str, Any]) -> Dict[str, List[float]]:
    if "scores" in params:
        return {str(k): list(v) for k, v in params["scores"].items()}
    path = str(params["path"])
    if path not in _fixture_cache:
        text = Path(path).read_text()
        try:
            data = json.loads(text)
            table = {str(k): list(v) for k, v in data.items()}
        except ValueError:
            table = {}
            for line in text.splitlines():
                if line.strip():
                    rec = json.loads(line)
                    table[str(rec["id"])] = list(rec["scores"])
        _fixture_cache[path] = table
    return _fixture_cache[path]


def score_chain(
    chain: ReasoningChain,
    context: NormalizedAlert,
    label: Label,
    scorer: ScorerSpec,
) -> RelevanceVector:
    if not chain.steps:
        raise RelevanceError("cannot score an empty chain")
    if scorer.kind == "keyword":
        w = scorer.weights()
        return RelevanceVector(tuple(keyword_score(s.text, w) for s in chain.steps), scorer.scorer_id)
    if scorer.kind == "fixture":
        table = _fixture_table(scorer.params)
        if chain.chain_id not in table:
            raise RelevanceError(f"fixture has no scores for chain {chain.chain_id!r}")
        scores = tuple(float(x) for x in table[chain.chain_id])
        if len(scores) != len(chain):
            raise RelevanceError(f"fixture scores for {chain.chain_id!r} do not match chain length")
        return RelevanceVector(scores, scorer.scorer_id)
    return _score_external(chain, context, label, scorer)


def _score_external(chain, context, label, scorer: ScorerSpec) -> RelevanceVector:
    pool = shared_pool(
        scorer.params["command"],
        int(scorer.params.get("processes", 1)),
        float(scorer.params.get("timeout_s", DEFAULT_TIMEOUT_S)),
    )
    request = {
        "id": chain.chain_id or context.alert_id,
        "context": context.to_dict(),
        "label": label.to_dict(),
        "steps": [s.text for s in chain.steps],
    }
    try:
        reply = pool.request(request)
    except ProtocolError as exc:
        raise ExternalScorerFailure(str(exc)) from exc
    scores = reply.get("scores")
    if not isinstance(scores, list) or len(scores) != len(chain):
        raise ExternalScorerFailure("scorer returned wrong number of scores")
    try:
        return RelevanceVector(
            tuple(float(s) for s in scores),
            scorer.scorer_id,
            str(reply.get("aggregation", "")),
        )
    except (TypeError, ValueError) as exc:
        raise ExternalScorerFailure(f"bad scores: {exc}") from exc


def information_density(
    steps: Sequence[ReasoningStep],
    scores: Sequence[float],
    epsilon_smooth: float = DEFAULT_EPSILON_SMOOTH,
) -> float:
    """Summed relevance over smoothed token length; 0 for an empty selection."""
    if len(steps) != len(scores):
        raise RelevanceError("scores must match the selected steps")
    if epsilon_smooth <= 0:
        raise RelevanceError("epsilon_smooth must be positive")
    if not steps:
        return 0.0
    return math.fsum(scores) / (sum(s.token_len for s in steps) + epsilon_smooth)
