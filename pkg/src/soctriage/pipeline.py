"""End-to-end triage: normalize, route, infer, render, with latency budgets."""
from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple, Union

import yaml

from .compression import CompressionConfig, CompressionError, FidelityEvaluatorSpec
from .experts import (
    FALLBACK,
    ExpertError,
    ExpertOutput,
    ExpertRegistry,
    ExpertSpec,
    ExternalExpertFailure,
    canonical_json,
    render_soar,
)
from .ontology import (
    CATEGORIES,
    Label,
    LabelMapping,
    MissingLabel,
    NormalizationSchema,
    NormalizedAlert,
    OntologyError,
    RawLog,
    Taxonomy,
    default_label_mapping,
    map_label,
    normalize,
)
from .relevance import RelevanceError, ScorerSpec
from .routing import RouterConfig, RouterError, RoutingDecision, route

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 64


class ConfigError(ValueError):
    pass


def default_experts() -> List[ExpertSpec]:
    specs = [ExpertSpec(f"expert-{c.lower()}", c) for c in CATEGORIES]
    specs.append(ExpertSpec("expert-fallback", FALLBACK))
    return specs


@dataclass(frozen=True)
class PipelineConfig:
    schema: NormalizationSchema = field(default_factory=NormalizationSchema)
    taxonomy: Taxonomy = field(default_factory=Taxonomy)
    label_table: LabelMapping = field(default_factory=default_label_mapping)
    router: RouterConfig = field(default_factory=RouterConfig)
    experts: Tuple[ExpertSpec, ...] = field(default_factory=lambda: tuple(default_experts()))
    compression: CompressionConfig = field(default_factory=CompressionConfig)
    scorer: ScorerSpec = field(default_factory=ScorerSpec)
    fidelity: FidelityEvaluatorSpec = field(default_factory=FidelityEvaluatorSpec)
    delta_t_s: float = 3.0
    delta_token: int = 64
    arrival_rate: Optional[float] = None
    service_window_s: float = 300.0
    seed: int = 0
    jobs: int = 1
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        if not self.delta_t_s > 0:
            raise ConfigError("budgets.delta_t_s must be > 0")
        if self.jobs < 1 or self.window < 1:
            raise ConfigError("jobs and window must be >= 1")
        problems = self.label_table.validate(self.taxonomy)
        if problems:
            raise ConfigError("label table: " + "; ".join(problems[:5]))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PipelineConfig":
        known = {"seed", "ontology", "router", "experts", "compression", "scorer", "fidelity",
                 "budgets", "arrival_rate", "service_window_s", "parallel", "latency"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config sections: {unknown}")
        try:
            onto = d.get("ontology") or {}
            taxonomy = Taxonomy.from_dict(onto.get("taxonomy") or {})
            if "labels" in onto:
                labels_cfg = dict(onto["labels"])
                labels_cfg.setdefault("taxonomy", taxonomy.to_dict())
                table = LabelMapping.from_dict(labels_cfg)
            else:
                table = default_label_mapping(taxonomy)
            budgets = d.get("budgets") or {}
            comp = dict(d.get("compression") or {})
            if "delta_token" in budgets:
                comp.setdefault("delta_token", int(budgets["delta_token"]))
            parallel = d.get("parallel") or {}
            experts = [ExpertSpec.from_dict(e) for e in d["experts"]] if d.get("experts") else default_experts()
            router_cfg = dict(d.get("router") or {})
            # ``latency`` fills in simulated component times wherever none is given.
            latency = d.get("latency") or {}
            if "route_s" in latency:
                router_cfg.setdefault("simulated_latency_s", float(latency["route_s"]))
            if "expert_s" in latency:
                experts = [e if e.simulated_latency_s is not None
                           else replace(e, simulated_latency_s=float(latency["expert_s"])) for e in experts]
            return cls(
                schema=NormalizationSchema.from_dict(onto.get("schema") or {}),
                taxonomy=taxonomy,
                label_table=table,
                router=RouterConfig.from_dict(router_cfg),
                experts=tuple(experts),
                compression=CompressionConfig.from_dict(comp),
                scorer=ScorerSpec.from_dict(d.get("scorer") or {}),
                fidelity=FidelityEvaluatorSpec.from_dict(d.get("fidelity") or {}),
                delta_t_s=float(budgets.get("delta_t_s", 3.0)),
                delta_token=int(budgets.get("delta_token", comp.get("delta_token", 64))),
                arrival_rate=d.get("arrival_rate"),
                service_window_s=float(d.get("service_window_s", 300.0)),
                seed=int(d.get("seed", 0)),
                jobs=int(parallel.get("jobs", 1)),
                window=int(parallel.get("window", DEFAULT_WINDOW)),
            )
        except ConfigError:
            raise
        except (OntologyError, RouterError, ExpertError, CompressionError, RelevanceError,
                KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{type(exc).__name__}: {exc}") from exc

    def to_dict(self) -> Dict[str, Any]:
        router = {
            "tau": self.router.tau,
            "backend": self.router.backend,
            "params": dict(self.router.params),
            "redaction": list(self.router.redaction),
            "max_response_tokens": self.router.max_response_tokens,
        }
        if self.router.simulated_latency_s is not None:
            router["simulated_latency_s"] = self.router.simulated_latency_s
        return {
            "seed": self.seed,
            "ontology": {
                "schema": self.schema.to_dict(),
                "taxonomy": self.taxonomy.to_dict(),
                "labels": self.label_table.to_dict(),
            },
            "router": router,
            "experts": [e.to_dict() for e in self.experts],
            "compression": self.compression.to_dict(),
            "scorer": self.scorer.to_dict(),
            "fidelity": {"kind": self.fidelity.kind, "params": dict(self.fidelity.params)},
            "budgets": {"delta_t_s": self.delta_t_s, "delta_token": self.delta_token},
            "arrival_rate": self.arrival_rate,
            "service_window_s": self.service_window_s,
            "parallel": {"jobs": self.jobs, "window": self.window},
        }


def load_config(path: Union[str, Path]) -> PipelineConfig:
    """Read a YAML or JSON config file (JSON is valid YAML)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML/JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return PipelineConfig.from_dict(data)


@dataclass(frozen=True)
class TriageRecord:
    seq: int
    alert_id: str
    soar: Mapping[str, Any]
    budget_ok: bool
    wall_times: Mapping[str, Any]
    degraded_input: bool = False
    truth: Optional[Label] = None

    def to_dict(self) -> Dict[str, Any]:
        d = {
            "seq": self.seq,
            "alert_id": self.alert_id,
            "soar": dict(self.soar),
            "budget_ok": self.budget_ok,
            "wall_times": dict(self.wall_times),
            "degraded_input": self.degraded_input,
        }
        if self.truth is not None:
            d["truth"] = self.truth.to_dict()
        return d

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TriageRecord":
        truth = Label.from_dict(d["truth"]) if d.get("truth") else None
        return cls(int(d["seq"]), str(d["alert_id"]), dict(d["soar"]), bool(d["budget_ok"]),
                   dict(d.get("wall_times") or {}), bool(d.get("degraded_input", False)), truth)


def _strict_truth(alert: NormalizedAlert, table: LabelMapping) -> Optional[Label]:
    if alert.raw_label is None:
        return None
    try:
        return map_label(alert.raw_label, LabelMapping(table.entries, None))
    except MissingLabel:
        return None


class Pipeline:
    """A config bound to its expert registry; safe to share across threads."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        try:
            self.registry = ExpertRegistry(cfg.experts, cfg.label_table, cfg.taxonomy)
        except ExpertError as exc:
            raise ConfigError(str(exc)) from exc

    def _normalize(self, item: Union[RawLog, Mapping[str, Any]]) -> NormalizedAlert:
        try:
            raw = item if isinstance(item, RawLog) else RawLog.from_dict(item)
            return normalize(raw, self.cfg.schema)
        except (OntologyError, KeyError, TypeError, ValueError) as exc:
            log.warning("degraded input: %s", exc)
            payload = item.get("payload") if isinstance(item, Mapping) else None
            given = None
            if isinstance(payload, Mapping):
                given = payload.get(self.cfg.schema.id_field)
            aid = str(given) if given else "a-" + _digest(item)
            return NormalizedAlert(alert_id=aid, degraded_input=True)

    def _infer(self, alert: NormalizedAlert, decision: RoutingDecision) -> Tuple[ExpertOutput, str]:
        expert = self.registry[decision.routed_expert]
        try:
            return expert.infer(alert), expert.expert_id
        except ExternalExpertFailure as exc:
            log.warning("expert %s failed on %s: %s", expert.expert_id, alert.alert_id, exc)
        fallback = self.registry.fallback
        if fallback.expert_id != expert.expert_id:
            try:
                return fallback.infer(alert), fallback.expert_id
            except ExternalExpertFailure as exc:
                log.warning("fallback expert failed on %s: %s", alert.alert_id, exc)
        label = Label("Medium", "Other", "Unknown")
        escalation = ExpertOutput(("No expert produced a verdict; escalated for manual review.",), label, 0.0, True)
        return escalation, fallback.expert_id

    def triage(self, item: Union[RawLog, Mapping[str, Any]], seq: int = 1) -> TriageRecord:
        alert = self._normalize(item)
        decision = route(alert, self.cfg.router, self.registry)

        t0 = time.perf_counter()
        output, expert_id = self._infer(alert, decision)
        measured_expert = time.perf_counter() - t0
        if expert_id != decision.routed_expert:
            decision = RoutingDecision(decision.k_pred, decision.p_conf, expert_id, decision.used_fallback,
                                       decision.degraded, decision.request_payload,
                                       decision.response_tokens, decision.latency_s)
        spec_latency = self.registry[expert_id].spec.simulated_latency_s
        expert_s = spec_latency if spec_latency is not None else measured_expert
        simulated = self.cfg.router.simulated_latency_s is not None and spec_latency is not None
        timings = {"route_s": decision.latency_s, "expert_s": expert_s,
                   "total_s": decision.latency_s + expert_s}
        soar = render_soar(output, decision, alert.alert_id, timings)
        wall = dict(timings, mode="simulated" if simulated else "measured")
        return TriageRecord(
            seq=seq,
            alert_id=alert.alert_id,
            soar=soar,
            budget_ok=timings["total_s"] <= self.cfg.delta_t_s,
            wall_times=wall,
            degraded_input=alert.degraded_input,
            truth=_strict_truth(alert, self.cfg.label_table),
        )

    def run(self, alerts: Iterable[Union[RawLog, Mapping[str, Any]]], jobs: Optional[int] = None,
            sink=None) -> List[TriageRecord]:
        """Triage every alert; ``seq`` is assigned at ingest, output is in seq order.

        With ``jobs > 1`` at most ``window`` alerts are in flight; the producer
        blocks rather than dropping. ``sink`` receives records as they complete,
        from a single thread.
        """
        jobs = jobs or self.cfg.jobs
        if jobs <= 1:
            records = []
            for seq, item in enumerate(alerts, 1):
                rec = self.triage(item, seq)
                if sink is not None:
                    sink(rec)
                records.append(rec)
            return records

        done: Dict[int, TriageRecord] = {}
        lock = threading.Lock()
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            in_flight = set()
            for seq, item in enumerate(alerts, 1):
                if len(in_flight) >= self.cfg.window:
                    finished, in_flight = wait(in_flight, return_when=FIRST_COMPLETED)
                    self._collect(finished, done, lock, sink)
                in_flight.add(pool.submit(self.triage, item, seq))
            finished, _ = wait(in_flight)
            self._collect(finished, done, lock, sink)
        return [done[s] for s in sorted(done)]

    @staticmethod
    def _collect(futures, done, lock, sink):
        for fut in futures:
            rec = fut.result()
            with lock:
                done[rec.seq] = rec
                if sink is not None:
                    sink(rec)


def _digest(obj: Any) -> str:
    import hashlib

    try:
        blob = json.dumps(obj, sort_keys=True, default=str)
    except (TypeError, ValueError):
        blob = repr(obj)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def triage(alert: Union[RawLog, Mapping[str, Any]], cfg: PipelineConfig, seq: int = 1) -> TriageRecord:
    return Pipeline(cfg).triage(alert, seq)


def run_stream(alerts: Iterable[Union[RawLog, Mapping[str, Any]]], cfg: PipelineConfig,
               jobs: Optional[int] = None, baseline_tokens: Optional[float] = None):
    """Returns ``(records, report)``; the report is None when no record carries ground truth."""
    from .metrics import evaluate

    records = Pipeline(cfg).run(alerts, jobs)
    truth = {r.alert_id: r.truth for r in records if r.truth is not None}
    report = None
    if truth and len(truth) == len(records):
        report = evaluate(records, truth, baseline_tokens)
    return records, report
