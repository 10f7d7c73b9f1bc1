import sys

import pytest

from soctriage.pipeline import ConfigError, Pipeline, PipelineConfig, load_config, run_stream, triage
from soctriage.ontology import RawLog

from helpers import config, corpus


def test_simulated_latency_and_budget():
    recs = corpus(20)
    cfg = config(recs, latency={"route_s": 0.22, "expert_s": 2.09}, budgets={"delta_t_s": 2.0})
    records, _ = run_stream([r.raw for r in recs], cfg)
    assert all(abs(r.soar["latency"]["total_s"] - 2.31) <= 1e-9 for r in records)
    assert not any(r.budget_ok for r in records)
    cfg3 = config(recs, latency={"route_s": 0.22, "expert_s": 2.09}, budgets={"delta_t_s": 3.0})
    assert all(r.budget_ok for r in run_stream([r.raw for r in recs], cfg3)[0])


def test_oracle_roundtrip_and_seq():
    recs = corpus(100)
    records, report = run_stream([r.raw for r in recs], config(recs))
    assert [r.seq for r in records] == list(range(1, 101))
    assert report.acc_risk == 1.0 and report.acc_threat == 1.0


def test_parallel_matches_serial():
    recs = corpus(150)
    cfg = config(recs, latency={"route_s": 0.1, "expert_s": 0.2}, parallel={"window": 4})
    a = [r.to_json() for r in Pipeline(cfg).run([r.raw for r in recs], jobs=1)]
    b = [r.to_json() for r in Pipeline(cfg).run([r.raw for r in recs], jobs=8)]
    assert a == b


def test_router_down_everything_falls_back():
    recs = corpus(30)
    cfg = config(router={"backend": "external", "params": {"command": [sys.executable, "-c", "pass"]}})
    records, _ = run_stream([r.raw for r in recs], cfg)
    assert len(records) == 30
    assert all(r.soar["routing"]["degraded"] and r.soar["routing"]["expert_id"] == "expert-fallback"
               for r in records)


def test_empty_and_garbage_payloads_still_produce_records():
    cfg = config()
    rec = triage(RawLog("edr", {"host": "h"}), cfg)
    assert rec.degraded_input and rec.soar["routing"]["expert_id"] == "expert-fallback"
    bad = triage({"source": "nope", "payload": {}}, cfg)
    assert bad.degraded_input and bad.soar["reasoning"]


def test_audit_fields_never_empty():
    recs = corpus(40)
    for r in run_stream([r.raw for r in recs], config(recs))[0]:
        assert r.soar["reasoning"] and r.soar["routing"]["expert_id"]


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"nonsense": {}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"budgets": {"delta_t_s": 0}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"router": {"tau": 3}})
    p = tmp_path / "c.yaml"
    p.write_text("router:\n  tau: 0.7\n")
    assert load_config(p).router.tau == 0.7
    p.write_text("- a list\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_config_roundtrip():
    cfg = config(corpus(5), latency={"route_s": 0.2, "expert_s": 1.0})
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg


def test_example_config_loads():
    from pathlib import Path

    cfg = load_config(Path(__file__).parent.parent / "config.example.yaml")
    assert cfg.router.simulated_latency_s == 0.22
    assert Pipeline(cfg).registry.expert_for("Exploitation") == "expert-web"
