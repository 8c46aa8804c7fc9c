"""Per-token uncertainty criteria and abnormal-token detection.

Three criteria are computed from the trace: the max next-token
probability (confident tokens score high, so outliers sit in the lower
tail), the entropy of the next-token distribution, and the maximum
Jensen-Shannon divergence between the final layer's distribution and
each candidate intermediate layer's (both upper tail). Abnormal values
are flagged per sentence with Tukey quartile fences, then contiguous
flagged tokens are widened to word boundaries to form entity spans.
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass, field

import numpy as np

from .errors import CriterionUnavailable, DegenerateDistribution, MissingLayer
from .trace import GenerationTrace, SparseDistribution, TokenRecord, answer_slice, sentence_spans

C_M = "c_m"
C_E = "c_e"
C_JS = "c_js"
CRITERIA = (C_M, C_E, C_JS)

UPPER = "upper"
LOWER = "lower"

# c_m is a confidence score, the other two are uncertainty scores
_TAIL_FOR = {C_M: LOWER, C_E: UPPER, C_JS: UPPER}

_WORD_DELIMS = set((string.whitespace + string.punctuation).encode("ascii"))


@dataclass(frozen=True)
class UncertaintyScores:
    """Per-token criterion vectors; c_js is None when the trace has no layer data."""

    c_m: tuple[float, ...]
    c_e: tuple[float, ...]
    c_js: tuple[float, ...] | None
    provenance: dict[str, str] = field(default_factory=dict)

    def vector(self, criterion: str) -> tuple[float, ...] | None:
        return {C_M: self.c_m, C_E: self.c_e, C_JS: self.c_js}[criterion]


@dataclass(frozen=True)
class FlaggedEntity:
    """A word-aligned answer span whose tokens tripped at least one criterion."""

    surface_text: str
    char_start: int
    char_end: int
    token_range: range
    criteria: frozenset[str]
    peak_scores: dict[str, float]


def entropy(dist: SparseDistribution, vocab_size: int) -> float:
    """Entropy in nats; exact when the exporter recorded it.

    Without the exact value, the residual mass is treated as uniform
    over the unlisted vocabulary ids.
    """
    if not dist.top_entries and dist.residual_mass <= 0.0:
        raise DegenerateDistribution("distribution has no mass")
    bound = math.log(vocab_size)
    if dist.exact_entropy is not None:
        return min(max(dist.exact_entropy, 0.0), bound)
    h = -sum(p * math.log(p) for _, p in dist.top_entries if p > 0.0)
    residual = dist.residual_mass
    unlisted = vocab_size - len(dist.top_entries)
    if residual > 0.0 and unlisted > 0:
        h -= residual * (math.log(residual) - math.log(unlisted))
    return min(max(h, 0.0), bound) + 0.0


def max_prob(dist: SparseDistribution) -> float:
    """Probability of the most likely next token."""
    if dist.exact_max_prob is not None:
        return dist.exact_max_prob
    if not dist.top_entries:
        raise DegenerateDistribution("distribution has no top entries")
    return dist.top_entries[0][1]


def _as_mapping(dist: SparseDistribution, bucket: object) -> dict[object, float]:
    probs: dict[object, float] = {tid: p for tid, p in dist.top_entries}
    if dist.residual_mass > 0.0:
        probs[bucket] = dist.residual_mass
    return probs


def jsd(p: SparseDistribution, q: SparseDistribution) -> float:
    """Jensen-Shannon divergence in nats, in [0, ln 2].

    Residual masses are kept in per-distribution buckets (never shared),
    which upper-bounds the divergence of the untruncated rows; the value
    is exact when both residuals are zero. Structurally equal inputs
    denote the same underlying distribution and return 0.
    """
    if not p.top_entries and p.residual_mass <= 0.0:
        raise DegenerateDistribution("first distribution has no mass")
    if not q.top_entries and q.residual_mass <= 0.0:
        raise DegenerateDistribution("second distribution has no mass")
    if p.top_entries == q.top_entries and p.residual_mass == q.residual_mass:
        return 0.0
    pm = _as_mapping(p, bucket=("other", 0))
    qm = _as_mapping(q, bucket=("other", 1))
    div = 0.0
    for key in pm.keys() | qm.keys():
        pv = pm.get(key, 0.0)
        qv = qm.get(key, 0.0)
        m = 0.5 * (pv + qv)
        if pv > 0.0:
            div += 0.5 * pv * math.log(pv / m)
        if qv > 0.0:
            div += 0.5 * qv * math.log(qv / m)
    return min(max(div, 0.0), math.log(2.0))


def c_js_score(token: TokenRecord, candidate_layers: tuple[int, ...]) -> float:
    """Max divergence between the final layer and any candidate layer."""
    best = 0.0
    for layer in candidate_layers:
        if layer not in token.layer_dists:
            raise MissingLayer(layer)
        best = max(best, jsd(token.final_dist, token.layer_dists[layer]))
    return best


def _has_layer_data(trace: GenerationTrace) -> bool:
    layers = trace.header.candidate_layers
    if not layers:
        return False
    return all(
        all(j in tok.layer_dists for j in layers) for tok in trace.tokens
    )


def score_trace(trace: GenerationTrace) -> UncertaintyScores:
    """Compute every criterion the trace supports."""
    vocab = trace.header.vocab_size
    c_m_vec = tuple(max_prob(tok.final_dist) for tok in trace.tokens)
    c_e_vec = tuple(entropy(tok.final_dist, vocab) for tok in trace.tokens)
    provenance = {
        C_M: "exact"
        if all(tok.final_dist.exact_max_prob is not None for tok in trace.tokens)
        else "truncated",
        C_E: "exact"
        if all(tok.final_dist.exact_entropy is not None for tok in trace.tokens)
        else "truncated",
    }
    c_js_vec: tuple[float, ...] | None = None
    if _has_layer_data(trace):
        layers = trace.header.candidate_layers
        c_js_vec = tuple(c_js_score(tok, layers) for tok in trace.tokens)
        exact = all(
            tok.final_dist.residual_mass == 0.0
            and all(d.residual_mass == 0.0 for d in tok.layer_dists.values())
            for tok in trace.tokens
        )
        provenance[C_JS] = "exact" if exact else "truncated"
    return UncertaintyScores(c_m=c_m_vec, c_e=c_e_vec, c_js=c_js_vec, provenance=provenance)


def detect_outliers(values: list[float], tail: str, fence_k: float) -> set[int]:
    """Indices of values beyond the Tukey fence on the given tail.

    Quartiles use linear interpolation between closest ranks
    (rank = (n - 1) * q on the sorted list).
    """
    if not values:
        raise ValueError("values must be non-empty")
    if fence_k <= 0.0:
        raise ValueError("fence_k must be positive")
    if tail not in (UPPER, LOWER):
        raise ValueError(f"unknown tail {tail!r}")
    arr = np.asarray(values, dtype=float)
    q1, q3 = np.percentile(arr, [25.0, 75.0])
    iqr = q3 - q1
    if tail == UPPER:
        fence = q3 + fence_k * iqr
        hits = np.nonzero(arr > fence)[0]
    else:
        fence = q1 - fence_k * iqr
        hits = np.nonzero(arr < fence)[0]
    return {int(i) for i in hits}


def flag_tokens(
    trace: GenerationTrace,
    scores: UncertaintyScores,
    criteria: frozenset[str] | set[str],
    fence_k: float = 1.5,
    short_sentence_min: int = 4,
) -> list[set[str]]:
    """Per-token sets of criteria that flagged each token.

    Outlier detection runs per sentence and per criterion independently;
    sentences shorter than short_sentence_min tokens fall back to a
    whole-response window.
    """
    unknown = set(criteria) - set(CRITERIA)
    if unknown:
        raise ValueError(f"unknown criteria: {sorted(unknown)}")
    if C_JS in criteria and scores.c_js is None:
        raise CriterionUnavailable(
            "c_js requested but the trace carries no candidate-layer distributions"
        )

    n = len(trace.tokens)
    flags: list[set[str]] = [set() for _ in range(n)]
    response_outliers: dict[str, set[int]] = {}

    def response_level(criterion: str) -> set[int]:
        if criterion not in response_outliers:
            vec = scores.vector(criterion)
            assert vec is not None
            response_outliers[criterion] = detect_outliers(
                list(vec), _TAIL_FOR[criterion], fence_k
            )
        return response_outliers[criterion]

    for _, span in sentence_spans(trace):
        indices = list(span)
        for criterion in criteria:
            vec = scores.vector(criterion)
            assert vec is not None
            if len(indices) < short_sentence_min:
                hits = response_level(criterion) & set(indices)
            else:
                window = [vec[i] for i in indices]
                local = detect_outliers(window, _TAIL_FOR[criterion], fence_k)
                hits = {indices[i] for i in local}
            for i in hits:
                flags[i].add(criterion)
    return flags


def _expand_to_word(answer_bytes: bytes, start: int, end: int, lo: int, hi: int) -> tuple[int, int]:
    """Widen a byte span to word boundaries, staying within [lo, hi].

    Delimiter bytes the tokens themselves carried (leading spaces,
    trailing punctuation) are trimmed first so they cannot bridge into
    the neighboring word.
    """
    while start < end and answer_bytes[start] in _WORD_DELIMS:
        start += 1
    while end > start and answer_bytes[end - 1] in _WORD_DELIMS:
        end -= 1
    if start == end:
        return start, end
    while start > lo and answer_bytes[start - 1] not in _WORD_DELIMS:
        start -= 1
    while end < hi and answer_bytes[end] not in _WORD_DELIMS:
        end += 1
    return start, end


def entities_from_tokens(
    trace: GenerationTrace,
    flags: list[set[str]],
    scores: UncertaintyScores,
) -> list[FlaggedEntity]:
    """Merge contiguous flagged tokens into word-aligned entity spans.

    Runs never cross sentence boundaries; duplicate surface texts are
    deduplicated case-insensitively, unioning criteria and keeping the
    peak score per criterion.
    """
    if len(flags) != len(trace.tokens):
        raise ValueError("flags must align with trace tokens")
    answer_bytes = trace.header.answer.encode("utf-8")
    entities: list[FlaggedEntity] = []
    seen: dict[str, int] = {}

    for _, span in sentence_spans(trace):
        indices = list(span)
        sent_lo = min(trace.tokens[i].char_start for i in indices)
        sent_hi = max(trace.tokens[i].char_end for i in indices)
        run: list[int] = []
        for i in indices + [-1]:
            if i != -1 and flags[i]:
                run.append(i)
                continue
            if not run:
                continue
            start = trace.tokens[run[0]].char_start
            end = trace.tokens[run[-1]].char_end
            start, end = _expand_to_word(answer_bytes, start, end, sent_lo, sent_hi)
            criteria = frozenset().union(*(flags[j] for j in run))
            peaks: dict[str, float] = {}
            for criterion in criteria:
                vec = scores.vector(criterion)
                assert vec is not None
                peaks[criterion] = max(vec[j] for j in run)
            surface = answer_slice(trace.header.answer, start, end)
            run_range = range(run[0], run[-1] + 1)
            run = []
            if not surface:
                continue
            key = surface.lower()
            if key in seen:
                prior = entities[seen[key]]
                merged_peaks = dict(prior.peak_scores)
                for criterion, value in peaks.items():
                    merged_peaks[criterion] = max(merged_peaks.get(criterion, 0.0), value)
                entities[seen[key]] = FlaggedEntity(
                    surface_text=prior.surface_text,
                    char_start=prior.char_start,
                    char_end=prior.char_end,
                    token_range=prior.token_range,
                    criteria=prior.criteria | criteria,
                    peak_scores=merged_peaks,
                )
            else:
                seen[key] = len(entities)
                entities.append(
                    FlaggedEntity(
                        surface_text=surface,
                        char_start=start,
                        char_end=end,
                        token_range=run_range,
                        criteria=criteria,
                        peak_scores=peaks,
                    )
                )
    return entities
