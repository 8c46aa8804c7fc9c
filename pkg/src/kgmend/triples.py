"""Knowledge-triple extraction and refinement.

The default extractor is a deterministic pattern inventory applied per
sentence; an external extraction service can be used instead (or as a
primary with rule fallback, per pipeline config). Refinement keeps only
the triples that mention a flagged entity, which is what makes the
later retrieval stage cheap.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

import requests

from .errors import MalformedResponse, ServiceUnavailable
from .uncertainty import FlaggedEntity

EXTRACTED = "extracted"
RETRIEVED = "retrieved"
SYNONYM_EXPANDED = "synonym-expanded"

STAGE_ALL = "all_extracted"
STAGE_REFINED = "refined"
STAGE_EXPANDED = "expanded"
STAGE_RETRIEVED = "retrieved"


def normalize_slot(text: str) -> str:
    """Lowercase, trim, and collapse internal whitespace."""
    return " ".join(text.lower().split())


def slot_words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", normalize_slot(text))


@dataclass(frozen=True)
class Triple:
    subject: str
    predicate: str
    object: str
    provenance: str = EXTRACTED
    answer_span: tuple[int, int] | None = None

    def normalized(self) -> tuple[str, str, str]:
        return (
            normalize_slot(self.subject),
            normalize_slot(self.predicate),
            normalize_slot(self.object),
        )

    def is_wellformed(self) -> bool:
        return all(self.normalized())


@dataclass(frozen=True)
class TripleSet:
    triples: tuple[Triple, ...]
    stage: str

    @classmethod
    def build(cls, triples: list[Triple] | tuple[Triple, ...], stage: str) -> "TripleSet":
        """Deduplicate on normalized slots, preserving first occurrence."""
        seen: set[tuple[str, str, str]] = set()
        kept: list[Triple] = []
        for t in triples:
            key = t.normalized()
            if key not in seen:
                seen.add(key)
                kept.append(t)
        return cls(triples=tuple(kept), stage=stage)

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self):
        return iter(self.triples)


_LIST_SPLIT = re.compile(r"\s*,\s*(?:and\s+)?|\s+and\s+", re.IGNORECASE)

# Ordered pattern inventory; the first matching pattern wins per clause.
# Patterns later in the list are strictly more general.
_PATTERNS: list[tuple[re.Pattern, str, bool]] = [
    (
        re.compile(r"(?P<s>.+?)\s+(?:is|are)\s+diagnosed\s+by\s+(?P<o>.+)", re.IGNORECASE),
        "diagnosed by",
        False,
    ),
    (
        re.compile(
            r"(?P<s>.+?)\s+(?:is|are)\s+treated\s+(?P<r>with|by)\s+(?P<o>.+)",
            re.IGNORECASE,
        ),
        "treated {r}",
        False,
    ),
    (
        re.compile(r"(?P<s>.+?)\s+(?:is|are)\s+caused\s+by\s+(?P<o>.+)", re.IGNORECASE),
        "caused by",
        False,
    ),
    (
        re.compile(
            r"the\s+(?P<k>symptoms|signs)\s+of\s+(?P<s>.+?)\s+(?:include|are)\s+(?P<o>.+)",
            re.IGNORECASE,
        ),
        "{k} include",
        True,
    ),
    (
        re.compile(r"(?P<s>.+?)\s+includes?\s+(?P<o>.+)", re.IGNORECASE),
        "includes",
        True,
    ),
    (
        re.compile(r"(?P<s>.+?)\s+(?P<v>is|are)\s+(?P<o>.+)", re.IGNORECASE),
        "{v}",
        False,
    ),
]

_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def split_sentences(text: str) -> list[tuple[int, int, str]]:
    """Sentences with their byte spans into the text."""
    sentences: list[tuple[int, int, str]] = []
    char_start = 0
    for match in _SENTENCE_END.finditer(text):
        chunk = text[char_start : match.start()]
        if chunk.strip():
            sentences.append((char_start, match.start(), chunk))
        char_start = match.end()
    tail = text[char_start:]
    if tail.strip():
        sentences.append((char_start, len(text), tail))
    # convert char offsets to byte offsets
    out: list[tuple[int, int, str]] = []
    for start, end, chunk in sentences:
        b_start = len(text[:start].encode("utf-8"))
        b_end = b_start + len(chunk.encode("utf-8"))
        out.append((b_start, b_end, chunk))
    return out


def _clean_slot(text: str) -> str:
    return text.strip().strip(".!?").strip()


def _triples_from_clause(clause: str, span: tuple[int, int]) -> list[Triple]:
    clause = clause.strip()
    if not clause:
        return []
    for pattern, pred_template, is_list in _PATTERNS:
        m = pattern.fullmatch(clause.rstrip(".!?").strip())
        if not m:
            continue
        groups = {k: (v or "").lower() for k, v in m.groupdict().items()}
        subject = _clean_slot(m.group("s"))
        predicate = pred_template.format(**groups)
        raw_object = _clean_slot(m.group("o"))
        if not subject or not raw_object:
            return []
        objects = (
            [o for o in (_clean_slot(x) for x in _LIST_SPLIT.split(raw_object)) if o]
            if is_list
            else [raw_object]
        )
        return [
            Triple(
                subject=subject,
                predicate=predicate,
                object=obj,
                provenance=EXTRACTED,
                answer_span=span,
            )
            for obj in objects
        ]
    return []


def extract_triples_rules(answer: str) -> TripleSet:
    """Extract triples with the fixed pattern inventory.

    Sentences that match no pattern yield no triples; a wrong guess is
    worse than a miss for a verification tool.
    """
    triples: list[Triple] = []
    for b_start, b_end, sentence in split_sentences(answer):
        for clause in sentence.split(";"):
            triples.extend(_triples_from_clause(clause, (b_start, b_end)))
    return TripleSet.build([t for t in triples if t.is_wellformed()], STAGE_ALL)


def _locate_span(answer: str, needle: str) -> tuple[int, int] | None:
    pos = answer.lower().find(needle.lower())
    if pos < 0:
        return None
    for b_start, b_end, sentence in split_sentences(answer):
        char_b = len(answer[:pos].encode("utf-8"))
        if b_start <= char_b < b_end:
            return (b_start, b_end)
    return None


def extract_triples_external(answer: str, endpoint: str, timeout: float = 10.0) -> TripleSet:
    """Fetch triples from an extraction service.

    Wire contract: POST {"text": answer} -> {"triples": [[s, p, o], ...]}.
    Transport failures and non-2xx statuses raise ServiceUnavailable;
    contract violations raise MalformedResponse.
    """
    try:
        response = requests.post(endpoint, json={"text": answer}, timeout=timeout)
    except requests.RequestException as exc:
        raise ServiceUnavailable(f"extraction service unreachable: {exc}")
    if not 200 <= response.status_code < 300:
        raise ServiceUnavailable(
            f"extraction service returned status {response.status_code}"
        )
    try:
        payload = response.json()
    except ValueError:
        raise MalformedResponse("extraction service returned invalid JSON")
    if not isinstance(payload, dict) or not isinstance(payload.get("triples"), list):
        raise MalformedResponse('extraction response must carry a "triples" list')

    triples: list[Triple] = []
    for item in payload["triples"]:
        if (
            not isinstance(item, (list, tuple))
            or len(item) != 3
            or not all(isinstance(slot, str) for slot in item)
        ):
            raise MalformedResponse(f"triple must be [subject, predicate, object]: {item!r}")
        t = Triple(subject=item[0], predicate=item[1], object=item[2], provenance=EXTRACTED)
        if not t.is_wellformed():
            raise MalformedResponse(f"triple has an empty slot: {item!r}")
        triples.append(replace(t, answer_span=_locate_span(answer, t.object)))
    return TripleSet.build(triples, STAGE_ALL)


def _contains_word_run(haystack: list[str], needle: list[str]) -> bool:
    if not needle or len(needle) > len(haystack):
        return False
    for i in range(len(haystack) - len(needle) + 1):
        if haystack[i : i + len(needle)] == needle:
            return True
    return False


def refine_triples(all_triples: TripleSet, entities: list[FlaggedEntity]) -> TripleSet:
    """Keep the triples that mention some flagged entity in any slot.

    Matching is contiguous word-subsequence containment after
    normalization, so "art" never matches inside "heart".
    """
    entity_words = [slot_words(e.surface_text) for e in entities]
    entity_words = [w for w in entity_words if w]
    kept: list[Triple] = []
    for t in all_triples:
        slots = [slot_words(t.subject), slot_words(t.predicate), slot_words(t.object)]
        if any(
            _contains_word_run(slot, words) for slot in slots for words in entity_words
        ):
            kept.append(t)
    return TripleSet.build(kept, STAGE_REFINED)
