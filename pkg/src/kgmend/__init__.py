"""kgmend: verify an LLM answer's risky facts against a knowledge graph and mend the text.

The flow mirrors the four stages visible in the public API: score token
uncertainty and flag entities, extract and refine knowledge triples,
retrieve candidates from the graph, then verify and rectify.
"""

from .config import PipelineConfig, load_config_file
from .errors import (
    CriterionUnavailable,
    CycleError,
    DegenerateDistribution,
    KgmendError,
    MalformedResponse,
    MissingLayer,
    OverlappingEdits,
    ParseError,
    ServiceUnavailable,
    ValidationError,
)
from .kg import KnowledgeGraph, RetrievalResult, expand_synonyms, load_kg, retrieve
from .pipeline import (
    BenchComparison,
    CorpusResult,
    RunReport,
    bench_refinement,
    report_to_dict,
    run_corpus,
    run_pipeline,
)
from .trace import (
    GenerationTrace,
    SparseDistribution,
    TokenRecord,
    TraceHeader,
    load_trace,
    sentence_spans,
    serialize_trace,
)
from .triples import (
    Triple,
    TripleSet,
    extract_triples_external,
    extract_triples_rules,
    refine_triples,
)
from .uncertainty import (
    FlaggedEntity,
    UncertaintyScores,
    c_js_score,
    detect_outliers,
    entities_from_tokens,
    entropy,
    flag_tokens,
    jsd,
    max_prob,
    score_trace,
)
from .verify import (
    RectifiedAnswer,
    SimilarityWeights,
    VerificationDecision,
    rectify,
    similarity,
    surface_repair,
    verify_triple,
)

__version__ = "0.1.0"

__all__ = [
    "BenchComparison",
    "CorpusResult",
    "CriterionUnavailable",
    "CycleError",
    "DegenerateDistribution",
    "FlaggedEntity",
    "GenerationTrace",
    "KgmendError",
    "KnowledgeGraph",
    "MalformedResponse",
    "MissingLayer",
    "OverlappingEdits",
    "ParseError",
    "PipelineConfig",
    "RectifiedAnswer",
    "RetrievalResult",
    "RunReport",
    "ServiceUnavailable",
    "SimilarityWeights",
    "SparseDistribution",
    "TokenRecord",
    "TraceHeader",
    "Triple",
    "TripleSet",
    "UncertaintyScores",
    "ValidationError",
    "VerificationDecision",
    "bench_refinement",
    "c_js_score",
    "detect_outliers",
    "entities_from_tokens",
    "entropy",
    "expand_synonyms",
    "extract_triples_external",
    "extract_triples_rules",
    "flag_tokens",
    "jsd",
    "load_config_file",
    "load_kg",
    "load_trace",
    "max_prob",
    "rectify",
    "refine_triples",
    "report_to_dict",
    "retrieve",
    "run_corpus",
    "run_pipeline",
    "score_trace",
    "sentence_spans",
    "serialize_trace",
    "similarity",
    "surface_repair",
    "verify_triple",
]
