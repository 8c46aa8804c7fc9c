"""Triple verification against retrieved candidates, and answer rectification.

A refined triple is kept when its best candidate scores above the
threshold, replaced by the best candidate otherwise, and reported
unverifiable when retrieval found nothing (never silently deleted).
Rectification splices replacement objects into the answer text and
finishes with a deterministic surface repair pass.
"""

from __future__ import annotations

import difflib
import re
from dataclasses import dataclass, field
from typing import Callable

import requests

from .errors import MalformedResponse, OverlappingEdits, ServiceUnavailable
from .kg import KnowledgeGraph
from .triples import Triple, normalize_slot

KEPT = "kept"
REPLACED = "replaced"
UNVERIFIABLE = "unverifiable"

Scorer = Callable[[Triple, Triple], float]


@dataclass(frozen=True)
class SimilarityWeights:
    subject: float = 0.25
    predicate: float = 0.15
    object: float = 0.60

    def validate(self) -> None:
        total = self.subject + self.predicate + self.object
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"similarity weights must sum to 1, got {total!r}")


@dataclass(frozen=True)
class VerificationDecision:
    original: Triple
    candidates: tuple[tuple[Triple, float], ...]
    outcome: str
    final: Triple
    tau: float


@dataclass(frozen=True)
class Edit:
    """One contiguous change, as a char range into the original answer."""

    start: int
    end: int
    replacement: str
    decision_index: int | None = None


@dataclass(frozen=True)
class RectifiedAnswer:
    text: str
    edits: tuple[Edit, ...]
    appended_corrections: tuple[str, ...] = field(default_factory=tuple)


def _slot_tokens(text: str, kg: KnowledgeGraph | None) -> frozenset[str]:
    phrase = kg.canonical(text) if kg is not None else normalize_slot(text)
    tokens = set()
    for tok in re.findall(r"[a-z0-9]+", phrase):
        tokens.add(kg.canonical(tok) if kg is not None else tok)
    return frozenset(tokens)


def _jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 1.0
    union = a | b
    return len(a & b) / len(union)


def similarity(
    a: Triple,
    b: Triple,
    kg: KnowledgeGraph | None = None,
    weights: SimilarityWeights = SimilarityWeights(),
) -> float:
    """Weighted per-slot token-set Jaccard after synonym canonicalization."""
    weights.validate()
    sim_s = _jaccard(_slot_tokens(a.subject, kg), _slot_tokens(b.subject, kg))
    sim_p = _jaccard(_slot_tokens(a.predicate, kg), _slot_tokens(b.predicate, kg))
    sim_o = _jaccard(_slot_tokens(a.object, kg), _slot_tokens(b.object, kg))
    return weights.subject * sim_s + weights.predicate * sim_p + weights.object * sim_o


def make_lexical_scorer(
    kg: KnowledgeGraph | None = None,
    weights: SimilarityWeights = SimilarityWeights(),
) -> Scorer:
    return lambda a, b: similarity(a, b, kg=kg, weights=weights)


def similarity_external(a: Triple, b: Triple, endpoint: str, timeout: float = 10.0) -> float:
    """Score via a similarity service: {"a": [s,p,o], "b": [s,p,o]} -> {"score": x}."""
    payload = {
        "a": [a.subject, a.predicate, a.object],
        "b": [b.subject, b.predicate, b.object],
    }
    try:
        response = requests.post(endpoint, json=payload, timeout=timeout)
    except requests.RequestException as exc:
        raise ServiceUnavailable(f"similarity service unreachable: {exc}")
    if not 200 <= response.status_code < 300:
        raise ServiceUnavailable(
            f"similarity service returned status {response.status_code}"
        )
    try:
        body = response.json()
        score = float(body["score"])
    except (ValueError, TypeError, KeyError):
        raise MalformedResponse('similarity response must carry a numeric "score"')
    if not 0.0 <= score <= 1.0:
        raise MalformedResponse(f"similarity score out of [0, 1]: {score!r}")
    return score


def make_external_scorer(endpoint: str, timeout: float = 10.0) -> Scorer:
    return lambda a, b: similarity_external(a, b, endpoint, timeout=timeout)


def verify_triple(
    t0: Triple,
    retrieved: list[Triple] | tuple[Triple, ...],
    tau: float,
    scorer: Scorer | None = None,
) -> VerificationDecision:
    """Threshold decision: keep above tau, else replace with the argmax candidate.

    Ties at the argmax go to the earliest candidate in retrieval order;
    an empty candidate list leaves the triple unverifiable and unchanged.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau!r}")
    if scorer is None:
        scorer = make_lexical_scorer()
    scored = tuple((cand, scorer(t0, cand)) for cand in retrieved)
    if not scored:
        return VerificationDecision(
            original=t0, candidates=(), outcome=UNVERIFIABLE, final=t0, tau=tau
        )
    best_index = 0
    for i, (_, score) in enumerate(scored):
        if score > scored[best_index][1]:
            best_index = i
    best_score = scored[best_index][1]
    if best_score > tau:
        return VerificationDecision(
            original=t0, candidates=scored, outcome=KEPT, final=t0, tau=tau
        )
    return VerificationDecision(
        original=t0,
        candidates=scored,
        outcome=REPLACED,
        final=scored[best_index][0],
        tau=tau,
    )


_PUNCT_SPACE = re.compile(r"[ \t]+([.,;:!?])")
_MULTI_SPACE = re.compile(r"[ \t]{2,}")
_SENTENCE_START = re.compile(r"(^|[.!?][ \t]+)([a-z])")
_VOWELS = "aeiou"


def surface_repair(text: str) -> str:
    """Deterministic, idempotent surface cleanup.

    Collapses repeated spaces, removes space before punctuation, and
    capitalizes sentence starts.
    """
    text = _MULTI_SPACE.sub(" ", text)
    text = _PUNCT_SPACE.sub(r"\1", text)
    text = _SENTENCE_START.sub(lambda m: m.group(1) + m.group(2).upper(), text)
    return text


def _char_range_from_bytes(answer: str, byte_span: tuple[int, int]) -> tuple[int, int]:
    encoded = answer.encode("utf-8")
    start = len(encoded[: byte_span[0]].decode("utf-8", errors="replace"))
    end = len(encoded[: byte_span[1]].decode("utf-8", errors="replace"))
    return start, end


def _fix_article(answer: str, start: int, replacement: str) -> tuple[int, str]:
    """Extend a splice to correct a preceding indefinite article."""
    m = re.search(r"\b(a|an)[ \t]+$", answer[:start], flags=re.IGNORECASE)
    if not m or not replacement:
        return start, replacement
    wants_an = replacement[0].lower() in _VOWELS
    article = "an" if wants_an else "a"
    if m.group(1).lower() == article:
        return start, replacement
    keep_case = m.group(1)[0].isupper()
    article = article.capitalize() if keep_case else article
    return m.start(1), f"{article} {replacement}"


def reconstruct(answer: str, edits: tuple[Edit, ...], corrections: tuple[str, ...]) -> str:
    """Apply edits to the original answer, then append corrections."""
    body = answer
    for edit in sorted(edits, key=lambda e: e.start, reverse=True):
        body = body[: edit.start] + edit.replacement + body[edit.end :]
    for sentence in corrections:
        if body and not body[-1].isspace():
            body += " "
        body += sentence
    return body


def rectify(answer: str, decisions: list[VerificationDecision]) -> RectifiedAnswer:
    """Splice replacement objects into the answer and repair the surface.

    Replaced decisions whose object text cannot be located fall back to
    an appended correction sentence. Kept and unverifiable decisions
    change nothing.
    """
    splices: list[tuple[int, int, str, int]] = []
    corrections: list[str] = []
    lowered = answer.lower()

    for d_index, decision in enumerate(decisions):
        if decision.outcome != REPLACED:
            continue
        needle = decision.original.object.lower()
        pos = -1
        if decision.original.answer_span is not None:
            s_start, s_end = _char_range_from_bytes(answer, decision.original.answer_span)
            local = lowered[s_start:s_end].find(needle)
            if local >= 0:
                pos = s_start + local
        if pos < 0:
            pos = lowered.find(needle)
        if pos < 0:
            final = decision.final
            corrections.append(
                surface_repair(
                    f"Correction: {final.subject} {final.predicate} {final.object}."
                )
            )
            continue
        start, replacement = _fix_article(answer, pos, decision.final.object)
        splices.append((start, pos + len(needle), replacement, d_index))

    splices.sort(key=lambda s: s[0])
    for (a_start, a_end, _, left), (b_start, _, _, right) in zip(splices, splices[1:]):
        if b_start < a_end:
            raise OverlappingEdits(left, right)

    if not splices and not corrections:
        return RectifiedAnswer(text=answer, edits=(), appended_corrections=())

    body = answer
    for start, end, replacement, _ in reversed(splices):
        body = body[:start] + replacement + body[end:]
    repaired = surface_repair(body)

    # express original -> repaired as minimal edits so reconstruction is exact
    edits: list[Edit] = []
    matcher = difflib.SequenceMatcher(a=answer, b=repaired, autojunk=False)
    for op, i1, i2, j1, j2 in matcher.get_opcodes():
        if op == "equal":
            continue
        owner = None
        for start, end, _, d_index in splices:
            if i1 < max(end, start + 1) and i2 > start or (i1 == i2 and start <= i1 <= end):
                owner = d_index
                break
        edits.append(Edit(start=i1, end=i2, replacement=repaired[j1:j2], decision_index=owner))

    final_edits = tuple(edits)
    final_corrections = tuple(corrections)
    text = reconstruct(answer, final_edits, final_corrections)
    return RectifiedAnswer(
        text=text, edits=final_edits, appended_corrections=final_corrections
    )
