import random

import pytest
from hypothesis import given, settings, strategies as st

from soctriage.metrics import (
    CORRUPT_TOKEN,
    IdMismatch,
    PerturbationSpec,
    evaluate,
    perturb,
    round_half_up,
)
from soctriage.ontology import DEGRADED_KEY, Label, NormalizationSchema, RawLog, normalize


def record(aid, risk, category="Malware", subtype="Trojan", tokens=(2, 10), total=1.0):
    return {
        "alert_id": aid,
        "budget_ok": True,
        "soar": {
            "label": {"risk_level": risk, "category": category, "subtype": subtype},
            "latency": {"total_s": total},
            "tokens": {"route": tokens[0], "expert": tokens[1]},
        },
    }


def ten_case():
    truth_levels = ["High", "High", "Critical", "Critical"] + ["Low"] * 6
    preds = ["Low", "High", "Critical", "High"] + ["Medium"] + ["Low"] * 5
    truth = {f"a{i}": Label(t, "Malware", "Trojan") for i, t in enumerate(truth_levels)}
    recs = [record(f"a{i}", p) for i, p in enumerate(preds)]
    return recs, truth


def test_ten_case_fixture():
    recs, truth = ten_case()
    rep = evaluate(recs, truth)
    assert rep.r_high == 0.75
    assert rep.fpr == 1 / 6
    assert rep.acc_risk == 0.7
    assert sum(rep.confusion["Low"].values()) == 6


def test_perfect_and_token_cost():
    truth = {"a": Label("Low", "Other", "Unknown")}
    rep = evaluate([record("a", "Low", "Other", "Unknown", tokens=(0, 71))], truth, baseline_tokens=100)
    assert (rep.acc_risk, rep.acc_threat, rep.fpr) == (1.0, 1.0, 0.0)
    assert rep.token_cost_rel == pytest.approx(0.71)


def test_critical_on_benign_is_false_positive():
    rep = evaluate([record("a", "Critical")], {"a": Label("Low", "Malware", "Trojan")})
    assert rep.fpr == 1.0


def test_id_mismatch():
    with pytest.raises(IdMismatch):
        evaluate([record("a", "Low")], {"b": Label("Low", "Other", "Unknown")})


def test_permutation_invariant():
    recs, truth = ten_case()
    shuffled = recs[:]
    random.Random(3).shuffle(shuffled)
    assert evaluate(shuffled, truth) == evaluate(recs, truth)


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 2.49)] == [1, 2, 3, 2]


def big_alert(n_tokens=100):
    return RawLog("edr", {"alert_id": "big", "msg": " ".join(f"t{i}" for i in range(n_tokens)),
                          "proc": "x.exe", "dst": "10.0.0.1", "dport": "80", "proto": "tcp", "sha256": "ab"})


def test_corrupt_exact_count():
    out = perturb([big_alert()], PerturbationSpec("corrupt_tokens", p=0.15, seed=1))[0]
    assert out.payload["msg"].split().count(CORRUPT_TOKEN) == 15


def test_drop_critical_k3():
    out = perturb([big_alert()], PerturbationSpec("drop_critical", k=3, seed=2))[0]
    a = normalize(out, NormalizationSchema())
    assert len(a.present_slots()) == 3 and a.degraded_input
    assert out.payload[DEGRADED_KEY] == "true"


def test_truncate_fields_count():
    raw = RawLog("edr", {"alert_id": "x", "proc": "p", "a": "1", "b": "2", "c": "3", "d": "4"})
    out = perturb([raw], PerturbationSpec("truncate_fields", p=0.5, seed=0))[0]
    assert len(out.payload) == 4 and out.payload["proc"] == "p"


payload_st = st.dictionaries(st.sampled_from(["proc", "dst", "dport", "msg", "host", "user", "sha256", "proto"]),
                             st.sampled_from(["a b c", "10.0.0.2", "443", "tcp", "x y"]), min_size=1)


@settings(max_examples=100)
@given(payload_st, st.sampled_from(["truncate_fields", "corrupt_tokens", "drop_critical"]),
       st.floats(0, 1), st.integers(0, 8), st.integers(0, 50))
def test_perturb_determinism_and_identity(payload, kind, p, k, seed):
    raws = [RawLog("ids", dict(payload, alert_id="q"))]
    spec = PerturbationSpec(kind, p, k, seed)
    assert perturb(raws, spec) == perturb(raws, spec)
    zero = PerturbationSpec(kind, 0.0, 0, seed)
    assert perturb(perturb(raws, zero), zero) == raws


@settings(max_examples=50)
@given(payload_st, st.integers(0, 50))
def test_drop_critical_nested(payload, seed):
    raws = [RawLog("ids", dict(payload, alert_id="q"))]
    kept = [set(perturb(raws, PerturbationSpec("drop_critical", k=k, seed=seed))[0].payload) - {DEGRADED_KEY}
            for k in range(5)]
    assert all(a >= b for a, b in zip(kept, kept[1:]))
