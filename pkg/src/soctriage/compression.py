"""Greedy information-density compression of reasoning chains.

:func:`compress` picks steps in order of per-step density
``rel / (len + epsilon_smooth)`` until the token budget runs out, then runs a
bounded fidelity repair. :func:`oracle_optimal` enumerates every subset and is
the reference the greedy result is measured against.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .ontology import Label, NormalizedAlert
from .protocol import DEFAULT_TIMEOUT_S, ProtocolError, shared_pool
from .relevance import (
    DEFAULT_EPSILON_SMOOTH,
    ExternalScorerFailure,
    ReasoningChain,
    ReasoningStep,
    RelevanceVector,
    information_density,
)

VARIANTS = ("as_written", "density_improving")
ORACLE_MAX_STEPS = 20


class CompressionError(ValueError):
    pass


class LengthMismatch(CompressionError):
    pass


class ChainTooLong(CompressionError):
    pass


@dataclass(frozen=True)
class CompressionConfig:
    delta_token: int = 64
    epsilon_smooth: float = DEFAULT_EPSILON_SMOOTH
    epsilon_fidelity: float = 0.05
    variant: str = "as_written"
    skip_oversized: bool = False
    repair_rounds: int = 1

    def __post_init__(self):
        # 0 is tolerated so the degenerate empty-budget case stays expressible.
        if self.delta_token < 0:
            raise CompressionError("delta_token must be >= 0")
        if not self.epsilon_smooth > 0:
            raise CompressionError("epsilon_smooth must be positive")
        if not 0.0 <= self.epsilon_fidelity <= 1.0:
            raise CompressionError("epsilon_fidelity must lie in [0, 1]")
        if self.variant not in VARIANTS:
            raise CompressionError(f"variant must be one of {VARIANTS}")
        if self.repair_rounds < 0:
            raise CompressionError("repair_rounds must be >= 0")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CompressionConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise CompressionError(f"unknown compression options: {unknown}")
        return cls(**known)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class FidelityReport:
    p_full: float
    p_compressed: float
    satisfied: bool

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class FidelityEvaluatorSpec:
    kind: str = "coverage"
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("coverage", "external"):
            raise CompressionError(f"unknown fidelity evaluator {self.kind!r}")
        if self.kind == "external" and not self.params.get("command"):
            raise CompressionError("external fidelity evaluator needs a command")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FidelityEvaluatorSpec":
        return cls(d.get("kind", "coverage"), dict(d.get("params") or {}))


@dataclass(frozen=True)
class CompressedChain:
    selected: Tuple[int, ...]
    steps: Tuple[ReasoningStep, ...]
    density: float
    fidelity: FidelityReport
    repair_applied: bool = False

    @property
    def total_len(self) -> int:
        return sum(s.token_len for s in self.steps)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "selected": list(self.selected),
            "steps": [s.text for s in self.steps],
            "token_len": self.total_len,
            "density": self.density,
            "fidelity": self.fidelity.to_dict(),
            "repair_applied": self.repair_applied,
        }


def _check_lengths(chain: ReasoningChain, rel: RelevanceVector):
    if len(rel) != len(chain):
        raise LengthMismatch(f"{len(rel)} scores for {len(chain)} steps")


def _coverage(rel: Sequence[float], selected: Sequence[int]) -> float:
    if len(set(selected)) == len(rel):
        return 1.0
    total = math.fsum(rel)
    if total == 0:
        return 0.0
    return math.fsum(rel[j] for j in selected) / total


def _fidelity(context, label, full, selected, rel, fid, epsilon_fidelity) -> FidelityReport:
    if fid.kind == "coverage":
        p_full, p_sub = 1.0, _coverage(rel.scores, selected)
    else:
        p_full, p_sub = _external_fidelity(context, label, full, selected, fid)
    return FidelityReport(p_full, p_sub, p_sub >= p_full - epsilon_fidelity)


def _external_fidelity(context, label, full, selected, fid) -> Tuple[float, float]:
    pool = shared_pool(
        fid.params["command"],
        int(fid.params.get("processes", 1)),
        float(fid.params.get("timeout_s", DEFAULT_TIMEOUT_S)),
    )
    request = {
        "id": f"{full.chain_id or (context.alert_id if context else 'chain')}:{','.join(map(str, selected))}",
        "context": context.to_dict() if context is not None else None,
        "label": label.to_dict() if label is not None else None,
        "steps": [s.text for s in full.steps],
        "selected": list(selected),
    }
    try:
        reply = pool.request(request)
        p_full, p_sub = float(reply["p_full"]), float(reply["p_compressed"])
    except ProtocolError as exc:
        raise ExternalScorerFailure(str(exc)) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ExternalScorerFailure(f"bad fidelity response: {exc}") from exc
    if not (0.0 <= p_full <= 1.0 and 0.0 <= p_sub <= 1.0):
        raise ExternalScorerFailure("fidelity probabilities must lie in [0, 1]")
    return p_full, p_sub


def check_fidelity(
    context: Optional[NormalizedAlert],
    label: Optional[Label],
    full: ReasoningChain,
    sub: CompressedChain,
    rel: RelevanceVector,
    fid: FidelityEvaluatorSpec,
    epsilon_fidelity: float,
) -> FidelityReport:
    _check_lengths(full, rel)
    return _fidelity(context, label, full, sub.selected, rel, fid, epsilon_fidelity)


def greedy_order(lens: Sequence[int], rels: Sequence[float], epsilon_smooth: float) -> List[int]:
    """Indices by descending per-step density, lowest index first on ties.

    Densities are compared as exact rationals so ties and scale invariance do
    not depend on float rounding.
    """
    eps = Fraction(epsilon_smooth)
    keys = [Fraction(r) / (Fraction(n) + eps) for r, n in zip(rels, lens)]
    return sorted(range(len(lens)), key=lambda j: (-keys[j], j))


def greedy_select(lens: Sequence[int], rels: Sequence[float], cfg: CompressionConfig) -> List[int]:
    remaining = cfg.delta_token
    eps = Fraction(cfg.epsilon_smooth)
    rel_sum, len_sum = Fraction(0), 0
    chosen: List[int] = []
    for j in greedy_order(lens, rels, cfg.epsilon_smooth):
        if remaining <= 0:
            break
        if lens[j] > remaining:
            if cfg.skip_oversized:
                continue
            break
        if cfg.variant == "density_improving" and chosen:
            current = rel_sum / (len_sum + eps)
            after = (rel_sum + Fraction(rels[j])) / (len_sum + lens[j] + eps)
            if after < current:
                break
        chosen.append(j)
        rel_sum += Fraction(rels[j])
        len_sum += lens[j]
        remaining -= lens[j]
    return chosen


def _build(chain, rel, selected, cfg, fidelity, repaired) -> CompressedChain:
    order = tuple(sorted(selected))
    steps = tuple(chain.steps[j] for j in order)
    density = information_density(steps, [rel.scores[j] for j in order], cfg.epsilon_smooth)
    return CompressedChain(order, steps, density, fidelity, repaired)


def compress(
    chain: ReasoningChain,
    rel: RelevanceVector,
    context: Optional[NormalizedAlert] = None,
    label: Optional[Label] = None,
    cfg: CompressionConfig = CompressionConfig(),
    fid: FidelityEvaluatorSpec = FidelityEvaluatorSpec(),
) -> CompressedChain:
    _check_lengths(chain, rel)
    lens = [s.token_len for s in chain.steps]
    rels = rel.scores
    selected = greedy_select(lens, rels, cfg)
    remaining = cfg.delta_token - sum(lens[j] for j in selected)

    report = _fidelity(context, label, chain, selected, rel, fid, cfg.epsilon_fidelity)
    repaired = False
    rounds = min(cfg.repair_rounds, len(chain))
    while not report.satisfied and rounds > 0:
        unused = [j for j in range(len(chain)) if j not in selected and lens[j] <= remaining]
        if not unused:
            break
        best = min(unused, key=lambda j: (-rels[j], j))
        selected.append(best)
        remaining -= lens[best]
        repaired = True
        rounds -= 1
        report = _fidelity(context, label, chain, sorted(selected), rel, fid, cfg.epsilon_fidelity)
    return _build(chain, rel, selected, cfg, report, repaired)


def _exact_density(rels, lens, subset, eps: Fraction) -> Fraction:
    if not subset:
        return Fraction(0)
    return sum((Fraction(rels[j]) for j in subset), Fraction(0)) / (sum(lens[j] for j in subset) + eps)


def oracle_optimal(chain: ReasoningChain, rel: RelevanceVector, cfg: CompressionConfig) -> CompressedChain:
    """Exhaustive search over every subset within budget.

    Ties on density go to the lexicographically smallest index tuple.
    """
    _check_lengths(chain, rel)
    n = len(chain)
    if n > ORACLE_MAX_STEPS:
        raise ChainTooLong(f"oracle is limited to {ORACLE_MAX_STEPS} steps, got {n}")
    lens = np.array([s.token_len for s in chain.steps], dtype=np.int64)
    rels = np.array(rel.scores, dtype=np.float64)

    masks = (np.arange(1 << n, dtype=np.int64)[:, None] >> np.arange(n)) & 1
    total_len = masks @ lens
    feasible = total_len <= cfg.delta_token
    ids = np.where(feasible, (masks @ rels) / (total_len + cfg.epsilon_smooth), -1.0)
    ids[0] = 0.0
    best = ids.max()
    # Float sums are only used to shortlist; the winner is decided exactly.
    near = np.flatnonzero(ids >= best - 1e-9 * max(1.0, abs(best)))
    eps = Fraction(cfg.epsilon_smooth)
    rel_list, len_list = list(rel.scores), lens.tolist()
    candidates = [tuple(np.flatnonzero(masks[m]).tolist()) for m in near]
    exact = {c: _exact_density(rel_list, len_list, c, eps) for c in candidates}
    top = max(exact.values())
    winner = min(c for c in candidates if exact[c] == top)

    p_sub = _coverage(rel.scores, winner)
    report = FidelityReport(1.0, p_sub, p_sub >= 1.0 - cfg.epsilon_fidelity)
    return _build(chain, rel, list(winner), cfg, report, False)
