"""Command-line interface.

Exit codes: 0 success, 1 input error, 2 external-service error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import config as cfg
from .errors import KgmendError, MalformedResponse, ServiceUnavailable
from .kg import load_kg, lookup
from .pipeline import (
    StageError,
    bench_refinement,
    report_to_dict,
    run_corpus,
    run_pipeline,
    write_report,
)
from .trace import load_trace
from .triples import extract_triples_rules
from .uncertainty import entities_from_tokens, flag_tokens, score_trace

_CONFIG_FLAGS = (
    "criteria",
    "fence_k",
    "short_sentence_min",
    "tau",
    "w_subject",
    "w_predicate",
    "w_object",
    "max_expansions",
    "extractor",
    "extractor_endpoint",
    "similarity",
    "similarity_endpoint",
    "refinement",
    "parallelism",
)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    for key in _CONFIG_FLAGS:
        parser.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", default=None)


def _build_config(args: argparse.Namespace) -> cfg.PipelineConfig:
    config = cfg.PipelineConfig()
    if getattr(args, "config", None):
        config = cfg.load_config_file(args.config, base=config)
    overrides = {
        key: value
        for key in _CONFIG_FLAGS
        if (value := getattr(args, f"cfg_{key}", None)) is not None
    }
    config = cfg.apply_config_entries(config, overrides)
    config.validate()
    return config


def _load_graph(args: argparse.Namespace):
    return load_kg(args.kg, getattr(args, "synonyms", None))


def _cmd_run(args: argparse.Namespace) -> int:
    config = _build_config(args)
    trace = load_trace(args.trace)
    kg = _load_graph(args)
    report = run_pipeline(trace, kg, config)
    if args.out:
        write_report(report, args.out)
    else:
        json.dump(report_to_dict(report), sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    if args.rectified:
        with open(args.rectified, "w", encoding="utf-8") as fh:
            fh.write(report.rectified.text + "\n")
    return 0


def _cmd_corpus(args: argparse.Namespace) -> int:
    config = _build_config(args)
    kg = _load_graph(args)
    result = run_corpus(args.dir, kg, config)
    document = {
        "aggregate": result.aggregate,
        "failures": [{"path": p, "error": e} for p, e in result.failures],
        "reports": [
            {"path": p, "report": report_to_dict(r)} for p, r in result.reports
        ],
    }
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(document, fh, indent=2, sort_keys=True)
            fh.write("\n")
    else:
        json.dump(result.aggregate, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    config = _build_config(args)
    kg = _load_graph(args)
    comparison = bench_refinement(args.dir, kg, config)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(comparison.summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(comparison.human_readable())
    return 0


def _cmd_detect(args: argparse.Namespace) -> int:
    config = _build_config(args)
    trace = load_trace(args.trace)
    scores = score_trace(trace)
    flags = flag_tokens(
        trace, scores, config.criteria, config.fence_k, config.short_sentence_min
    )
    entities = entities_from_tokens(trace, flags, scores)
    for entity in entities:
        print(
            f"{entity.surface_text}\t[{entity.char_start},{entity.char_end})\t"
            + ",".join(sorted(entity.criteria))
        )
    return 0


def _cmd_extract(args: argparse.Namespace) -> int:
    triples = extract_triples_rules(args.text)
    for t in triples:
        print(f"{t.subject}\t{t.predicate}\t{t.object}")
    return 0


def _cmd_query(args: argparse.Namespace) -> int:
    kg = _load_graph(args)
    for t in lookup(kg, args.subject, args.predicate):
        print(f"{t.subject}\t{t.predicate}\t{t.object}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgmend",
        description="Verify an answer's risky facts against a knowledge graph and mend the text.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the full pipeline on one trace")
    run_p.add_argument("--trace", required=True)
    run_p.add_argument("--kg", required=True)
    run_p.add_argument("--synonyms")
    run_p.add_argument("--out")
    run_p.add_argument("--rectified")
    _add_config_flags(run_p)
    run_p.set_defaults(fn=_cmd_run)

    corpus_p = sub.add_parser("corpus", help="run the pipeline over a directory of traces")
    corpus_p.add_argument("--dir", required=True)
    corpus_p.add_argument("--kg", required=True)
    corpus_p.add_argument("--synonyms")
    corpus_p.add_argument("--out")
    _add_config_flags(corpus_p)
    corpus_p.set_defaults(fn=_cmd_corpus)

    bench_p = sub.add_parser("bench", help="compare retrieval cost with refinement on/off")
    bench_p.add_argument("--dir", required=True)
    bench_p.add_argument("--kg", required=True)
    bench_p.add_argument("--synonyms")
    bench_p.add_argument("--out")
    _add_config_flags(bench_p)
    bench_p.set_defaults(fn=_cmd_bench)

    detect_p = sub.add_parser("detect", help="print flagged entities for a trace")
    detect_p.add_argument("--trace", required=True)
    _add_config_flags(detect_p)
    detect_p.set_defaults(fn=_cmd_detect)

    extract_p = sub.add_parser("extract", help="print rule-extracted triples for a text")
    extract_p.add_argument("--text", required=True)
    extract_p.set_defaults(fn=_cmd_extract)

    query_p = sub.add_parser("query", help="single subject+predicate lookup against a KG")
    query_p.add_argument("--kg", required=True)
    query_p.add_argument("--synonyms")
    query_p.add_argument("--subject", required=True)
    query_p.add_argument("--predicate", required=True)
    query_p.set_defaults(fn=_cmd_query)
    return parser


def _is_service_error(exc: Exception) -> bool:
    if isinstance(exc, (ServiceUnavailable, MalformedResponse)):
        return True
    return isinstance(exc, StageError) and isinstance(
        exc.cause, (ServiceUnavailable, MalformedResponse)
    )


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (KgmendError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if _is_service_error(exc) else 1


if __name__ == "__main__":
    sys.exit(main())
