"""End-to-end orchestration: score, flag, extract, refine, retrieve, verify, rectify.

Also provides the corpus runner and the refinement-cost benchmark that
compares retrieval work with refinement switched on versus off.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import config as cfg
from .errors import KgmendError, OverlappingEdits
from .kg import KnowledgeGraph, RetrievalResult, retrieve
from .trace import GenerationTrace, load_trace
from .triples import (
    STAGE_REFINED,
    TripleSet,
    extract_triples_external,
    extract_triples_rules,
    refine_triples,
)
from .uncertainty import FlaggedEntity, entities_from_tokens, flag_tokens, score_trace
from .verify import (
    KEPT,
    RectifiedAnswer,
    Scorer,
    VerificationDecision,
    make_external_scorer,
    make_lexical_scorer,
    rectify,
    verify_triple,
)

SCHEMA_VERSION = 1


class StageError(KgmendError):
    """A module error annotated with the pipeline stage that raised it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class RunReport:
    question: str
    answer: str
    flagged_entities: tuple[FlaggedEntity, ...]
    counts: dict[str, int]
    decisions: tuple[VerificationDecision, ...]
    retrievals: tuple[dict, ...]
    rectified: RectifiedAnswer
    kg_query_count: int
    timings: dict[str, float]
    config: dict
    extractor_fallback: bool = False
    suppressed_edits: tuple[int, ...] = field(default_factory=tuple)


def _best_score(decision: VerificationDecision) -> float:
    return max((s for _, s in decision.candidates), default=0.0)


def _resolve_overlaps(
    answer: str, decisions: list[VerificationDecision]
) -> tuple[list[VerificationDecision], list[int]]:
    """Suppress the lower-scored edit of any overlapping decision pair.

    Suppressed decisions stay in the report unchanged; only their edit
    is withheld from rectification (stand-ins marked kept).
    """
    working = list(decisions)
    suppressed: list[int] = []
    while True:
        try:
            rectify(answer, working)
            return working, suppressed
        except OverlappingEdits as exc:
            loser = exc.left
            if _best_score(decisions[exc.left]) > _best_score(decisions[exc.right]):
                loser = exc.right
            suppressed.append(loser)
            stand_in = replace(working[loser], outcome=KEPT, final=working[loser].original)
            working[loser] = stand_in


def run_pipeline(
    trace: GenerationTrace, kg: KnowledgeGraph, config: cfg.PipelineConfig
) -> RunReport:
    """Run the four-stage flow on one trace and assemble the full report."""
    config.validate()
    timings: dict[str, float] = {}
    total_start = time.perf_counter()

    def timed(stage: str, fn, *args, **kwargs):
        started = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        finally:
            timings[stage] = time.perf_counter() - started

    try:
        scores = timed("score", score_trace, trace)
        flags = timed(
            "flag",
            flag_tokens,
            trace,
            scores,
            config.criteria,
            config.fence_k,
            config.short_sentence_min,
        )
        entities = timed("entities", entities_from_tokens, trace, flags, scores)
    except KgmendError as exc:
        raise StageError("detect", exc) from exc

    answer = trace.header.answer
    extractor_fallback = False
    try:
        if config.extractor == cfg.EXTRACTOR_RULES:
            all_triples = timed("extract", extract_triples_rules, answer)
        elif config.extractor == cfg.EXTRACTOR_EXTERNAL:
            all_triples = timed(
                "extract", extract_triples_external, answer, config.extractor_endpoint
            )
        else:
            started = time.perf_counter()
            try:
                all_triples = extract_triples_external(answer, config.extractor_endpoint)
            except KgmendError:
                extractor_fallback = True
                all_triples = extract_triples_rules(answer)
            timings["extract"] = time.perf_counter() - started
    except KgmendError as exc:
        raise StageError("extract", exc) from exc

    if config.refinement:
        refined = timed("refine", refine_triples, all_triples, entities)
    else:
        refined = TripleSet.build(list(all_triples), STAGE_REFINED)
        timings["refine"] = 0.0

    started = time.perf_counter()
    results: list[RetrievalResult] = [
        retrieve(t, kg, max_expansions=config.max_expansions) for t in refined
    ]
    timings["retrieve"] = time.perf_counter() - started

    scorer: Scorer
    if config.similarity == cfg.SIMILARITY_EXTERNAL:
        scorer = make_external_scorer(config.similarity_endpoint)
    else:
        scorer = make_lexical_scorer(kg=kg, weights=config.weights)

    started = time.perf_counter()
    try:
        decisions = [
            verify_triple(res.query_triple, res.retrieved, config.tau, scorer)
            for res in results
        ]
    except KgmendError as exc:
        raise StageError("verify", exc) from exc
    timings["verify"] = time.perf_counter() - started

    started = time.perf_counter()
    resolved, suppressed = _resolve_overlaps(answer, decisions)
    rectified = rectify(answer, resolved)
    timings["rectify"] = time.perf_counter() - started
    timings["total"] = time.perf_counter() - total_start

    kg_query_count = sum(res.query_count for res in results)
    counts = {
        "all_triples": len(all_triples),
        "refined": len(refined),
        "expanded": sum(len(res.expanded_queries) for res in results),
        "retrieved": sum(len(res.retrieved) for res in results),
        "entities": len(entities),
    }
    retrieval_summaries = tuple(
        {
            "query": list(res.query_triple.normalized()),
            "expanded": len(res.expanded_queries),
            "retrieved": len(res.retrieved),
            "query_count": res.query_count,
            "elapsed": res.elapsed,
        }
        for res in results
    )
    return RunReport(
        question=trace.header.question,
        answer=answer,
        flagged_entities=tuple(entities),
        counts=counts,
        decisions=tuple(decisions),
        retrievals=retrieval_summaries,
        rectified=rectified,
        kg_query_count=kg_query_count,
        timings=timings,
        config=config.to_dict(),
        extractor_fallback=extractor_fallback,
        suppressed_edits=tuple(suppressed),
    )


def report_to_dict(report: RunReport) -> dict:
    """JSON-ready document; keys mirror the report fields."""
    return {
        "schema_version": SCHEMA_VERSION,
        "question": report.question,
        "answer": report.answer,
        "flagged_entities": [
            {
                "surface_text": e.surface_text,
                "char_start": e.char_start,
                "char_end": e.char_end,
                "token_start": e.token_range.start,
                "token_end": e.token_range.stop,
                "criteria": sorted(e.criteria),
                "peak_scores": {k: e.peak_scores[k] for k in sorted(e.peak_scores)},
            }
            for e in report.flagged_entities
        ],
        "counts": report.counts,
        "decisions": [
            {
                "original": list(d.original.normalized()),
                "candidates": [
                    {"triple": list(t.normalized()), "score": s} for t, s in d.candidates
                ],
                "outcome": d.outcome,
                "final": list(d.final.normalized()),
                "tau": d.tau,
            }
            for d in report.decisions
        ],
        "retrievals": list(report.retrievals),
        "rectified": {
            "text": report.rectified.text,
            "edits": [
                {
                    "start": e.start,
                    "end": e.end,
                    "replacement": e.replacement,
                    "decision_index": e.decision_index,
                }
                for e in report.rectified.edits
            ],
            "appended_corrections": list(report.rectified.appended_corrections),
        },
        "kg_query_count": report.kg_query_count,
        "timings": report.timings,
        "config": report.config,
        "extractor_fallback": report.extractor_fallback,
        "suppressed_edits": list(report.suppressed_edits),
    }


def write_report(report: RunReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class CorpusResult:
    reports: tuple[tuple[str, RunReport], ...]
    failures: tuple[tuple[str, str], ...]
    aggregate: dict


def _aggregate(reports: list[tuple[str, RunReport]], failures: list[tuple[str, str]]) -> dict:
    n = len(reports)
    def mean(values: list[float]) -> float:
        return sum(values) / len(values) if values else 0.0

    def distribution(values: list[int]) -> dict:
        if not values:
            return {"mean": 0.0, "min": 0, "max": 0}
        return {"mean": mean([float(v) for v in values]), "min": min(values), "max": max(values)}

    query_counts = [r.kg_query_count for _, r in reports]
    return {
        "traces": n,
        "failures": len(failures),
        "total_kg_query_count": sum(query_counts),
        "mean_kg_query_count": mean([float(v) for v in query_counts]),
        "mean_retrieval_time": mean([r.timings.get("retrieve", 0.0) for _, r in reports]),
        "all_triples": distribution([r.counts["all_triples"] for _, r in reports]),
        "refined_triples": distribution([r.counts["refined"] for _, r in reports]),
        "entities": distribution([r.counts["entities"] for _, r in reports]),
    }


def run_corpus(
    corpus_dir: str, kg: KnowledgeGraph, config: cfg.PipelineConfig
) -> CorpusResult:
    """Run every trace file in a directory; per-file failures never abort the corpus."""
    config.validate()
    paths = sorted(str(p) for p in Path(corpus_dir).glob("*.jsonl"))
    reports: list[tuple[str, RunReport]] = []
    failures: list[tuple[str, str]] = []

    def one(path: str) -> tuple[str, RunReport | None, str | None]:
        try:
            trace = load_trace(path)
            return path, run_pipeline(trace, kg, config), None
        except (KgmendError, OSError) as exc:
            return path, None, f"{type(exc).__name__}: {exc}"

    if config.parallelism > 1:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            outcomes = list(pool.map(one, paths))
    else:
        outcomes = [one(p) for p in paths]

    for path, report, error in outcomes:
        if report is not None:
            reports.append((path, report))
        else:
            failures.append((path, error or "unknown error"))
    return CorpusResult(
        reports=tuple(reports),
        failures=tuple(failures),
        aggregate=_aggregate(reports, failures),
    )


@dataclass(frozen=True)
class BenchComparison:
    refined: CorpusResult
    unrefined: CorpusResult
    summary: dict

    def human_readable(self) -> str:
        s = self.summary
        lines = [
            f"{'mode':<12} {'kg_queries':>10} {'wall_s':>10} {'mean_retrieval_s':>17}",
            f"{'refined':<12} {s['refined']['kg_query_count']:>10} "
            f"{s['refined']['wall_time']:>10.3f} {s['refined']['mean_retrieval_time']:>17.6f}",
            f"{'unrefined':<12} {s['unrefined']['kg_query_count']:>10} "
            f"{s['unrefined']['wall_time']:>10.3f} {s['unrefined']['mean_retrieval_time']:>17.6f}",
            f"query-count ratio (refined/unrefined): {s['query_count_ratio']:.4f}",
            f"query-count reduction: {s['query_count_reduction_pct']:.1f}%",
        ]
        return "\n".join(lines)


def bench_refinement(
    corpus_dir: str, kg: KnowledgeGraph, config: cfg.PipelineConfig
) -> BenchComparison:
    """Run the corpus with refinement on and off and compare retrieval cost."""
    on_cfg = replace(config, refinement=True)
    off_cfg = replace(config, refinement=False)

    started = time.perf_counter()
    refined = run_corpus(corpus_dir, kg, on_cfg)
    refined_wall = time.perf_counter() - started

    started = time.perf_counter()
    unrefined = run_corpus(corpus_dir, kg, off_cfg)
    unrefined_wall = time.perf_counter() - started

    on_queries = refined.aggregate["total_kg_query_count"]
    off_queries = unrefined.aggregate["total_kg_query_count"]
    ratio = on_queries / off_queries if off_queries else 0.0
    summary = {
        "refined": {
            "kg_query_count": on_queries,
            "wall_time": refined_wall,
            "mean_retrieval_time": refined.aggregate["mean_retrieval_time"],
        },
        "unrefined": {
            "kg_query_count": off_queries,
            "wall_time": unrefined_wall,
            "mean_retrieval_time": unrefined.aggregate["mean_retrieval_time"],
        },
        "query_count_ratio": ratio,
        "query_count_reduction_pct": (1.0 - ratio) * 100.0 if off_queries else 0.0,
        "wall_time_ratio": refined_wall / unrefined_wall if unrefined_wall else 0.0,
    }
    return BenchComparison(refined=refined, unrefined=unrefined, summary=summary)
