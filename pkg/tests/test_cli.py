import json
import subprocess
import sys

import pytest

from soctriage.cli import main


def run(args, capsys, stdin=None, monkeypatch=None):
    if stdin is not None:
        import io
        monkeypatch.setattr(sys, "stdin", io.StringIO(stdin))
    try:
        code = main(args)
    except SystemExit as exc:
        code = exc.code
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def corpus(tmp_path, capsys):
    path = tmp_path / "corpus.jsonl"
    fx = tmp_path / "fx.json"
    code, _, _ = run(["dataset-gen", "--n", "60", "--seed", "3", "--out", str(path),
                      "--router-fixture", str(fx)], capsys)
    assert code == 0
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(f"router:\n  backend: fixture\n  params: {{path: {fx}}}\n"
                   "latency: {route_s: 0.22, expert_s: 2.09}\n")
    return path, cfg


def test_triage_then_eval(tmp_path, corpus, capsys):
    path, cfg = corpus
    out = tmp_path / "r.jsonl"
    code, _, err = run(["triage", "--config", str(cfg), "--in", str(path), "--out", str(out)], capsys)
    assert code == 0 and len(out.read_text().splitlines()) == 60
    assert json.loads(err.splitlines()[-1])["summary"]["written"] == 60
    code, text, _ = run(["eval", "--in", str(out), "--truth", str(path)], capsys)
    assert json.loads(text)["acc_risk"] == 1.0
    code, table, _ = run(["eval", "--in", str(out), "--format", "pretty"], capsys)
    assert "Acc_Risk" in table


def test_missing_config_exit_2(corpus, capsys):
    path, _ = corpus
    code, _, err = run(["triage", "--in", str(path)], capsys)
    assert code == 2 and json.loads(err)["error"] == "config"


def test_bad_config_and_unknown_flag(tmp_path, corpus, capsys):
    path, _ = corpus
    bad = tmp_path / "bad.yaml"
    bad.write_text("wrong_section: 1\n")
    assert run(["route", "--config", str(bad), "--in", str(path)], capsys)[0] == 2
    assert run(["normalize", "--frobnicate"], capsys)[0] == 2


def test_missing_input_exit_1(tmp_path, capsys):
    code, _, err = run(["normalize", "--in", str(tmp_path / "nope.jsonl")], capsys)
    assert code == 1 and json.loads(err)["error"] == "input"


def test_malformed_line_skipped(capsys, monkeypatch):
    lines = '{"source":"ids","payload":{"proc":"x"}}\n{broken\n'
    code, out, err = run(["normalize"], capsys, stdin=lines, monkeypatch=monkeypatch)
    assert code == 0 and len(out.splitlines()) == 1
    assert json.loads(err.splitlines()[-1])["summary"]["warnings"] == 1


def test_compress_and_oracle(capsys, monkeypatch):
    line = json.dumps({"id": "c", "steps": ["w " * 4, "w " * 6, "w " * 8], "scores": [5, 2, 1]})
    _, out, _ = run(["compress", "--budget", "10"], capsys, stdin=line, monkeypatch=monkeypatch)
    assert json.loads(out)["selected"] == [0, 1]
    _, out, _ = run(["oracle", "--budget", "10"], capsys, stdin=line, monkeypatch=monkeypatch)
    assert json.loads(out)["selected"] == [0]


def test_compress_corpus_records(corpus, capsys):
    path, _ = corpus
    code, out, _ = run(["compress", "--in", str(path), "--budget-ratio", "0.32"], capsys)
    docs = [json.loads(x) for x in out.splitlines()]
    assert code == 0 and len(docs) == 60
    assert all(d["token_len"] <= int(0.32 * d["full_len"]) for d in docs)


def test_partition_and_split(tmp_path, corpus, capsys):
    path, _ = corpus
    part = tmp_path / "part.json"
    assert run(["partition", "--in", str(path), "--min-samples", "10", "--out", str(part)], capsys)[0] == 0
    manifest = json.loads(part.read_text())
    assert sum(manifest["sizes"].values()) == 60
    code, out, _ = run(["split", "--in", str(path), "--seed", "1"], capsys)
    doc = json.loads(out)
    assert code == 0 and len(doc["train"]) + len(doc["val"]) + len(doc["test"]) == 60
    code, out, _ = run(["split", "--in", str(path), "--partition", str(part)], capsys)
    assert set(json.loads(out)) == set(manifest["domains"])
    assert run(["split", "--in", str(path), "--ratios", "0.5,0.5"], capsys)[0] == 2


def test_perturb_and_route(corpus, capsys, tmp_path):
    path, cfg = corpus
    code, out, _ = run(["perturb", "--in", str(path), "--kind", "drop_critical", "--k", "2", "--seed", "1"], capsys)
    first = json.loads(out.splitlines()[0])
    assert code == 0 and first["raw"]["payload"]["degraded_input"] == "true"
    code, out, _ = run(["route", "--config", str(cfg), "--in", str(path)], capsys)
    assert code == 0 and json.loads(out.splitlines()[0])["p_conf"] == 0.95


def test_dataset_gen_tuples(tmp_path, capsys):
    tuples = tmp_path / "t.jsonl"
    code, _, _ = run(["dataset-gen", "--n", "20", "--out", str(tmp_path / "c.jsonl"),
                      "--tuples-out", str(tuples), "--budget-ratio", "0.32"], capsys)
    assert code == 0 and len(tuples.read_text().splitlines()) == 20


def test_shell_pipe(tmp_path, corpus):
    path, cfg = corpus
    exe = [sys.executable, "-m", "soctriage"]
    gen = subprocess.run(exe + ["dataset-gen", "--n", "40", "--seed", "3"], capture_output=True, text=True, check=True)
    tri = subprocess.run(exe + ["triage", "--config", str(cfg), "--jobs", "4"], input=gen.stdout,
                         capture_output=True, text=True, check=True)
    ev = subprocess.run(exe + ["eval"], input=tri.stdout, capture_output=True, text=True, check=True)
    assert json.loads(ev.stdout)["n"] == 40
