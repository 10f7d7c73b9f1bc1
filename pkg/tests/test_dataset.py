from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from soctriage.compression import CompressionConfig
from soctriage.dataset import (
    DatasetError,
    EmptyReasoning,
    MultiSentenceStep,
    PAPER_DOMAINS,
    SplitSpec,
    SyntheticRecord,
    SyntheticSpec,
    build_tuple,
    category_counts,
    generate_synthetic,
    largest_remainder,
    partition,
    risk_counts,
    split,
)
from soctriage.ontology import Label, NormalizationSchema, Taxonomy, normalize, validate_label
from soctriage.relevance import ReasoningChain, RelevanceVector



def ctx():
    from soctriage.ontology import NormalizedAlert
    return NormalizedAlert("t1", process="x.exe")


LABEL = Label("High", "Malware", "Trojan")


def test_largest_remainder_exact_mix():
    mix = {"Malware": .25, "Exploitation": .35, "Reconnaissance": .20, "Exfiltration": .10, "Other": .10}
    assert largest_remainder(1000, mix) == {
        "Malware": 250, "Exploitation": 350, "Reconnaissance": 200, "Exfiltration": 100, "Other": 100}


@given(st.integers(0, 5000), st.dictionaries(st.sampled_from("abcdef"), st.integers(1, 100), min_size=1))
def test_largest_remainder_floor_or_ceiling(total, w):
    counts = largest_remainder(total, w)
    assert sum(counts.values()) == total
    norm = sum(w.values())
    for k, c in counts.items():
        exact = Fraction(w[k] * total, norm)
        assert exact - 1 < c < exact + 1


def test_synthetic_counts_and_labels_valid():
    recs = generate_synthetic(SyntheticSpec.preset("attack_log", 1000, seed=3), Taxonomy())
    assert category_counts(recs) == {"Malware": 250, "Exploitation": 350, "Reconnaissance": 200,
                                     "Exfiltration": 100, "Other": 100}
    assert sum(risk_counts(recs).values()) == 1000
    assert all(validate_label(r.label, Taxonomy()) == [] for r in recs)
    assert all(10 <= len(r.chain) <= 15 for r in recs)


def test_synthetic_deterministic_and_roundtrips():
    spec = SyntheticSpec.preset("risk_information", 50, seed=9)
    a, b = generate_synthetic(spec, Taxonomy()), generate_synthetic(spec, Taxonomy())
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    assert SyntheticRecord.from_dict(a[0].to_dict()).to_dict() == a[0].to_dict()
    assert set(risk_counts(a)) <= {"Low", "Medium", "High"}


def test_build_tuple_budget_and_provenance():
    rec = generate_synthetic(SyntheticSpec.preset("attack_log", 1, seed=1), Taxonomy())[0]
    alert = normalize(rec.raw, NormalizationSchema())
    rel = RelevanceVector(tuple(float(i % 3) for i in range(len(rec.chain))), "kw")
    budget = int(0.32 * rec.chain.total_len)
    tup = build_tuple(alert, rec.chain, rel, rec.label, CompressionConfig(delta_token=budget))
    assert 1 <= len(tup.compressed.selected) <= 5
    assert tup.compressed.total_len <= budget
    assert tup.provenance["scorer_id"] == "kw"


def test_build_tuple_errors():
    chain = ReasoningChain.from_texts(["a b c d e"], "c")
    with pytest.raises(EmptyReasoning):
        build_tuple(ctx(), chain, RelevanceVector((1.0,)), LABEL, CompressionConfig(delta_token=2))
    bad = ReasoningChain.from_texts(["First sentence. Second one"], "c")
    with pytest.raises(MultiSentenceStep):
        build_tuple(ctx(), bad, RelevanceVector((1.0,)), LABEL, CompressionConfig(delta_token=20))


def _corpus(counts):
    subtype = {"Malware": "Trojan", "Exploitation": "XSS", "Reconnaissance": "PortScan",
               "Exfiltration": "DataTransfer", "DoS": "Flood", "Other": "Unknown"}
    out = []
    for cat, n in counts.items():
        out += [(f"{cat}-{i}", Label("Low", cat, subtype[cat])) for i in range(n)]
    return out


def test_partition_min_samples_and_catch_all():
    corpus = _corpus({"Malware": 600, "Exploitation": 700, "DoS": 20, "Other": 30})
    part = partition(corpus, min_samples=500)
    assert set(part.domains) == {"Malware", "Exploitation", "other"}
    assert len(part.domains["other"]) == 50 and part.undersized == ("other",)
    ids = [i for v in part.domains.values() for i in v]
    assert sorted(ids) == sorted(i for i, _ in corpus)


def test_partition_k_max_and_pinned():
    corpus = _corpus({"Malware": 600, "Exploitation": 700, "Reconnaissance": 550})
    assert len(partition(corpus, 500, k_max=2).domains) == 2
    with pytest.raises(DatasetError):
        partition(corpus, 500, k_max=0)
    pinned = partition(corpus, 1, pinned=PAPER_DOMAINS)
    assert sum(len(v) for v in pinned.domains.values()) == len(corpus)


def test_split_deterministic_disjoint_complete():
    items = _corpus({"Malware": 37, "Exploitation": 51, "Other": 12})
    a = split(items, SplitSpec(seed=4))
    assert a == split(items, SplitSpec(seed=4))
    flat = a[0] + a[1] + a[2]
    assert sorted(flat) == sorted(i for i, _ in items)
    assert [len(x) for x in a] == [70, 10, 20]


def test_split_spec_validation():
    with pytest.raises(DatasetError):
        SplitSpec((0.5, 0.5, 0.5))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=1, max_size=8), st.integers(0, 99))
def test_split_stratum_cells_within_one(sizes, seed):
    cats = ["Malware", "Exploitation", "Reconnaissance", "Exfiltration", "DoS", "Other", "Malware", "Other"]
    risks = ["Low", "Low", "Low", "Low", "Low", "Low", "High", "High"]
    items = []
    for k, n in enumerate(sizes):
        items += [(f"{k}-{i}", Label(risks[k], cats[k], "Unknown")) for i in range(n)]
    ratios = (0.7, 0.1, 0.2)
    train, val, test = split(items, SplitSpec(ratios, seed))
    total = len(items)
    for bucket, r in zip((train, val, test), ratios):
        assert abs(len(bucket) - total * r) < 1
    labels = dict(items)
    for k in range(len(sizes)):
        key = (risks[k], cats[k])
        n = sum(1 for _, lab in items if (lab.risk_level, lab.category) == key)
        for bucket, r in zip((train, val, test), ratios):
            got = sum(1 for i in bucket if (labels[i].risk_level, labels[i].category) == key)
            assert abs(got - n * r) < 1
