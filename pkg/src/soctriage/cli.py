"""``soctriage`` command line.

Every subcommand reads JSONL from ``--in`` (default stdin) and writes to
``--out`` (default stdout). Exit codes: 0 success, 1 input error, 2 config or
usage error. Errors are a single JSON line on stderr.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import math
import sys
from typing import Any, Dict, Iterator, List, Optional, Sequence, TextIO, Tuple

from . import __version__
from .compression import (
    CompressionConfig,
    CompressionError,
    compress,
    oracle_optimal,
)
from .dataset import (
    PAPER_DOMAINS,
    PRESETS,
    DatasetError,
    SplitSpec,
    SyntheticRecord,
    SyntheticSpec,
    build_tuple,
    generate_synthetic,
    partition,
    split,
)
from .experts import canonical_json
from .metrics import IdMismatch, PerturbationSpec, evaluate, perturb
from .ontology import Label, NormalizedAlert, OntologyError, RawLog, load_raw_logs, normalize
from .pipeline import ConfigError, Pipeline, PipelineConfig, TriageRecord, load_config
from .relevance import (
    ExternalScorerFailure,
    ReasoningChain,
    RelevanceError,
    RelevanceVector,
    score_chain,
)
from .routing import route

EXIT_OK, EXIT_INPUT, EXIT_CONFIG = 0, 1, 2


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail(EXIT_CONFIG, "usage", message)


def _fail(code: int, kind: str, message: str):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    raise SystemExit(code)


class Run:
    """Per-invocation I/O state: warnings counter and output format."""

    def __init__(self, args):
        self.args = args
        self.warnings = 0
        self.written = 0

    def warn(self, message: str):
        self.warnings += 1
        sys.stderr.write(json.dumps({"warning": message}) + "\n")

    @contextlib.contextmanager
    def reader(self) -> Iterator[TextIO]:
        path = self.args.inp
        if path == "-":
            yield sys.stdin
            return
        try:
            fh = open(path)
        except OSError as exc:
            raise InputError(f"cannot read {path}: {exc}") from exc
        with fh:
            yield fh

    @contextlib.contextmanager
    def writer(self) -> Iterator[TextIO]:
        path = self.args.out
        if path == "-":
            yield sys.stdout
            sys.stdout.flush()
            return
        try:
            fh = open(path, "w")
        except OSError as exc:
            raise InputError(f"cannot write {path}: {exc}") from exc
        with fh:
            yield fh

    def emit(self, out: TextIO, obj: Any):
        if self.args.format == "pretty":
            out.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        else:
            out.write(canonical_json(obj) + "\n")
        self.written += 1

    def json_lines(self, fh: TextIO) -> Iterator[Tuple[int, Dict[str, Any]]]:
        for no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except ValueError as exc:
                self.warn(f"line {no}: malformed JSON ({exc})")
                continue
            if not isinstance(obj, dict):
                self.warn(f"line {no}: expected an object")
                continue
            yield no, obj

    def config(self, required: bool = False) -> PipelineConfig:
        if self.args.config is None:
            if required:
                raise ConfigError("--config is required for this command")
            return PipelineConfig()
        return load_config(self.args.config)


def _label_of(obj: Dict[str, Any]) -> Optional[Label]:
    if obj.get("label"):
        return Label.from_dict(obj["label"])
    return None


def _chain_and_scores(obj: Dict[str, Any], cfg: PipelineConfig):
    """Accept ``{id, steps, scores}`` lines or synthetic corpus records."""
    if "chain" in obj:
        rec = SyntheticRecord.from_dict(obj)
        alert = normalize(rec.raw, cfg.schema)
        chain, label = rec.chain, rec.label
    else:
        chain = ReasoningChain.from_dict(obj)
        label = _label_of(obj) or Label("Low", "Other", "Unknown")
        ctx = obj.get("context")
        alert = NormalizedAlert.from_dict(ctx) if ctx else NormalizedAlert(chain.chain_id or "chain", degraded_input=True)
    if obj.get("scores") is not None:
        rel = RelevanceVector(tuple(float(s) for s in obj["scores"]), "inline")
    else:
        rel = score_chain(chain, alert, label, cfg.scorer)
    return chain, rel, alert, label


def _compression_cfg(args, cfg: PipelineConfig) -> CompressionConfig:
    base = cfg.compression.to_dict()
    for name in ("variant", "repair_rounds", "epsilon_smooth", "epsilon_fidelity"):
        value = getattr(args, name)
        if value is not None:
            base[name] = value
    if args.budget is not None:
        base["delta_token"] = args.budget
    if args.skip_oversized:
        base["skip_oversized"] = True
    return CompressionConfig(**base)


def cmd_normalize(run: Run) -> int:
    cfg = run.config()
    with run.reader() as fh, run.writer() as out:
        for no, raw, err in load_raw_logs(fh):
            if err:
                run.warn(err)
                continue
            run.emit(out, normalize(raw, cfg.schema).to_dict())
    return EXIT_OK


def _cmd_chains(run: Run, oracle: bool) -> int:
    cfg = run.config()
    ccfg = _compression_cfg(run.args, cfg)
    with run.reader() as fh, run.writer() as out:
        for no, obj in run.json_lines(fh):
            try:
                chain, rel, alert, label = _chain_and_scores(obj, cfg)
                local = ccfg
                if run.args.budget_ratio is not None:
                    budget = int(math.floor(run.args.budget_ratio * chain.total_len))
                    local = CompressionConfig(**dict(ccfg.to_dict(), delta_token=budget))
                if oracle:
                    result = oracle_optimal(chain, rel, local)
                else:
                    result = compress(chain, rel, alert, label, local, cfg.fidelity)
            except (KeyError, TypeError, ValueError, ExternalScorerFailure) as exc:
                run.warn(f"line {no}: {type(exc).__name__}: {exc}")
                continue
            doc = result.to_dict()
            doc["id"] = chain.chain_id
            doc["full_len"] = chain.total_len
            run.emit(out, doc)
    return EXIT_OK


def cmd_compress(run: Run) -> int:
    return _cmd_chains(run, oracle=False)


def cmd_oracle(run: Run) -> int:
    return _cmd_chains(run, oracle=True)


def cmd_dataset_gen(run: Run) -> int:
    args = run.args
    cfg = run.config()
    spec = SyntheticSpec.preset(args.preset, args.n, args.seed or 0)
    records = generate_synthetic(spec, cfg.taxonomy, args.shard)
    with run.writer() as out:
        for rec in records:
            run.emit(out, rec.to_dict())
    if args.router_fixture:
        table = {r.record_id: {"category": r.label.category, "confidence": args.fixture_confidence}
                 for r in records}
        with open(args.router_fixture, "w") as fh:
            json.dump(table, fh, sort_keys=True, indent=1)
    if args.tuples_out:
        with open(args.tuples_out, "w") as fh:
            for rec in records:
                alert = normalize(rec.raw, cfg.schema)
                rel = score_chain(rec.chain, alert, rec.label, cfg.scorer)
                local = cfg.compression
                if args.budget_ratio is not None:
                    budget = int(math.floor(args.budget_ratio * rec.chain.total_len))
                    local = CompressionConfig(**dict(local.to_dict(), delta_token=budget))
                try:
                    tup = build_tuple(alert, rec.chain, rel, rec.label, local, cfg.fidelity)
                except DatasetError as exc:
                    run.warn(f"{rec.record_id}: {exc}")
                    continue
                fh.write(canonical_json(tup.to_dict()) + "\n")
    return EXIT_OK


def _id_label_pairs(run: Run) -> List[Tuple[str, Label]]:
    pairs = []
    with run.reader() as fh:
        for no, obj in run.json_lines(fh):
            try:
                pairs.append((str(obj["id"]), Label.from_dict(obj["label"])))
            except (KeyError, TypeError) as exc:
                run.warn(f"line {no}: needs id and label ({exc})")
    return pairs


def cmd_partition(run: Run) -> int:
    args = run.args
    pairs = _id_label_pairs(run)
    pinned = PAPER_DOMAINS if args.paper_domains else None
    result = partition(pairs, args.min_samples, args.k_max, args.catch_all, pinned)
    with run.writer() as out:
        run.emit(out, result.to_dict())
    return EXIT_OK


def cmd_split(run: Run) -> int:
    args = run.args
    try:
        ratios = tuple(float(x) for x in args.ratios.split(","))
        spec = SplitSpec(ratios, args.seed or 0)
    except (ValueError, DatasetError) as exc:
        raise ConfigError(f"bad --ratios: {exc}") from exc
    pairs = _id_label_pairs(run)
    groups: Dict[str, List[Tuple[str, Label]]] = {"all": pairs}
    if args.partition:
        with open(args.partition) as fh:
            manifest = json.load(fh)
        by_id = dict(pairs)
        groups = {d: [(i, by_id[i]) for i in ids if i in by_id] for d, ids in manifest["domains"].items()}
    doc = {}
    for name, items in sorted(groups.items()):
        train, val, test = split(items, spec)
        doc[name] = {"train": train, "val": val, "test": test}
    with run.writer() as out:
        run.emit(out, doc if args.partition else doc["all"])
    return EXIT_OK


def cmd_route(run: Run) -> int:
    cfg = run.config(required=True)
    pipe = Pipeline(cfg)
    with run.reader() as fh, run.writer() as out:
        for no, raw, err in load_raw_logs(fh):
            if err:
                run.warn(err)
                continue
            alert = normalize(raw, cfg.schema)
            doc = route(alert, cfg.router, pipe.registry).to_dict()
            doc["alert_id"] = alert.alert_id
            run.emit(out, doc)
    return EXIT_OK


def cmd_triage(run: Run) -> int:
    cfg = run.config(required=True)
    pipe = Pipeline(cfg)
    items = []
    with run.reader() as fh:
        for no, obj in run.json_lines(fh):
            if "raw" in obj and "payload" not in obj:
                obj = obj["raw"]
            items.append(obj)
    records = pipe.run(items, jobs=run.args.jobs)
    with run.writer() as out:
        for rec in records:
            run.emit(out, rec.to_dict())
    return EXIT_OK


def cmd_eval(run: Run) -> int:
    args = run.args
    records = []
    with run.reader() as fh:
        for no, obj in run.json_lines(fh):
            try:
                records.append(TriageRecord.from_dict(obj))
            except (KeyError, TypeError, ValueError) as exc:
                run.warn(f"line {no}: not a triage record ({exc})")
    if args.truth:
        truth = {}
        with open(args.truth) as fh:
            for no, obj in run.json_lines(fh):
                truth[str(obj["id"])] = Label.from_dict(obj["label"])
    else:
        truth = {r.alert_id: r.truth for r in records if r.truth is not None}
    try:
        report = evaluate(records, truth, args.baseline_tokens)
    except IdMismatch as exc:
        raise InputError(str(exc)) from exc
    with run.writer() as out:
        if args.format == "pretty":
            out.write(report.table() + "\n")
        else:
            run.emit(out, report.to_dict())
    return EXIT_OK


def cmd_perturb(run: Run) -> int:
    args = run.args
    cfg = run.config()
    try:
        spec = PerturbationSpec(args.kind, args.p, args.k, args.seed or 0)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    with run.reader() as fh, run.writer() as out:
        for no, obj in run.json_lines(fh):
            wrapped = "raw" in obj and "payload" not in obj
            try:
                raw = RawLog.from_dict(obj["raw"] if wrapped else obj)
            except (KeyError, TypeError, ValueError, OntologyError) as exc:
                run.warn(f"line {no}: {exc}")
                continue
            damaged = perturb([raw], spec, cfg.schema)[0].to_dict()
            run.emit(out, dict(obj, raw=damaged) if wrapped else damaged)
    return EXIT_OK


COMMANDS = {
    "normalize": cmd_normalize,
    "compress": cmd_compress,
    "oracle": cmd_oracle,
    "dataset-gen": cmd_dataset_gen,
    "partition": cmd_partition,
    "split": cmd_split,
    "route": cmd_route,
    "triage": cmd_triage,
    "eval": cmd_eval,
    "perturb": cmd_perturb,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline config (YAML or JSON)")
    common.add_argument("--in", dest="inp", default="-", help="input JSONL, '-' for stdin")
    common.add_argument("--out", default="-", help="output path, '-' for stdout")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--format", choices=("jsonl", "pretty"), default="jsonl")

    parser = _Parser(prog="soctriage", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    sub.add_parser("normalize", parents=[common], help="raw logs -> normalized alerts")
    for name in ("compress", "oracle"):
        p = sub.add_parser(name, parents=[common], help=f"{name} reasoning chains")
        p.add_argument("--budget", type=int, help="token budget (overrides config)")
        p.add_argument("--budget-ratio", type=float, help="per-chain budget as a fraction of full length")
        p.add_argument("--variant", choices=("as_written", "density_improving"))
        p.add_argument("--skip-oversized", action="store_true")
        p.add_argument("--repair-rounds", type=int)
        p.add_argument("--epsilon-smooth", type=float)
        p.add_argument("--epsilon-fidelity", type=float)

    p = sub.add_parser("dataset-gen", parents=[common], help="synthetic labeled corpus")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--preset", choices=sorted(PRESETS), default="attack_log")
    p.add_argument("--shard", type=int, default=0)
    p.add_argument("--router-fixture", help="also write a truth-aligned router fixture here")
    p.add_argument("--fixture-confidence", type=float, default=0.95)
    p.add_argument("--tuples-out", help="also write compressed training tuples here")
    p.add_argument("--budget-ratio", type=float, help="per-chain budget for --tuples-out")

    p = sub.add_parser("partition", parents=[common], help="domain partition manifest")
    p.add_argument("--min-samples", type=int, default=500)
    p.add_argument("--k-max", type=int)
    p.add_argument("--catch-all", default="other")
    p.add_argument("--paper-domains", action="store_true", help="use the fixed four-domain layout")

    p = sub.add_parser("split", parents=[common], help="stratified train/val/test manifest")
    p.add_argument("--ratios", default="0.7,0.1,0.2")
    p.add_argument("--partition", help="partition manifest; split each domain separately")

    sub.add_parser("route", parents=[common], help="routing decision per alert")

    p = sub.add_parser("triage", parents=[common], help="full pipeline -> triage records")
    p.add_argument("--jobs", type=int, default=None)

    p = sub.add_parser("eval", parents=[common], help="metrics over triage records")
    p.add_argument("--truth", help="corpus JSONL with id and label; default: truth inside records")
    p.add_argument("--baseline-tokens", type=float, help="mean tokens of the verbose baseline")

    p = sub.add_parser("perturb", parents=[common], help="robustness perturbations")
    p.add_argument("--kind", required=True, choices=("truncate_fields", "drop_critical", "corrupt_tokens"))
    p.add_argument("--p", type=float, default=0.0)
    p.add_argument("--k", type=int, default=0)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    run = Run(args)
    try:
        code = COMMANDS[args.command](run)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, "config", str(exc))
    except (InputError, OntologyError, RelevanceError, CompressionError, DatasetError, OSError) as exc:
        _fail(EXIT_INPUT, "input", f"{type(exc).__name__}: {exc}")
    sys.stderr.write(json.dumps({"summary": {"command": args.command, "written": run.written,
                                             "warnings": run.warnings}}) + "\n")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
