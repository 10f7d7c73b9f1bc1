"""Shared builders for the pipeline-level tests."""
from soctriage.dataset import SyntheticSpec, generate_synthetic
from soctriage.ontology import Taxonomy
from soctriage.pipeline import PipelineConfig


def corpus(n=200, seed=7, preset="attack_log"):
    return generate_synthetic(SyntheticSpec.preset(preset, n, seed), Taxonomy())


def fixture_table(records, confidence=0.95):
    return {r.record_id: {"category": r.label.category, "confidence": confidence} for r in records}


def config(records=None, **sections):
    d = {"seed": 7}
    if records is not None:
        d["router"] = {"backend": "fixture", "params": {"table": fixture_table(records)}}
    d.update(sections)
    return PipelineConfig.from_dict(d)


def noisy_experts(rate, seed=0, **params):
    cats = ["Malware", "Exploitation", "Reconnaissance", "Exfiltration", "DoS", "Other"]
    p = dict(params, noise_rate=rate, seed=seed)
    specs = [{"expert_id": f"expert-{c.lower()}", "domain": c, "kind": "mock_noisy", "params": p} for c in cats]
    specs.append({"expert_id": "expert-fallback", "domain": "fallback", "kind": "mock_noisy", "params": p})
    return specs
