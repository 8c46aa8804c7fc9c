"""Immutable in-memory knowledge-graph triple store.

Triples are indexed by canonical (subject, predicate); canonical form
means normalized text collapsed through the synonym map. Retrieval is
exact on that pair - object slots are deliberately left free, they are
what verification compares. Fuzzy matching belongs to the verify stage,
not here, so retrieval stays auditable against a linear scan.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

from .errors import CycleError, ParseError
from .triples import RETRIEVED, SYNONYM_EXPANDED, Triple, normalize_slot

DEFAULT_MAX_EXPANSIONS = 16


@dataclass(frozen=True)
class KnowledgeGraph:
    triples: tuple[Triple, ...]
    sources: tuple[str, ...]
    index: dict[str, dict[str, tuple[int, ...]]]
    synonym_map: dict[str, str]
    synonym_groups: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def canonical(self, text: str) -> str:
        norm = normalize_slot(text)
        return self.synonym_map.get(norm, norm)

    def equivalents(self, text: str) -> tuple[str, ...]:
        """All known surface forms sharing this text's canonical form."""
        canon = self.canonical(text)
        return self.synonym_groups.get(canon, (canon,))

    def __len__(self) -> int:
        return len(self.triples)


@dataclass(frozen=True)
class RetrievalResult:
    query_triple: Triple
    expanded_queries: tuple[Triple, ...]
    retrieved: tuple[Triple, ...]
    query_count: int
    elapsed: float


def _collapse_synonyms(raw: dict[str, str]) -> dict[str, str]:
    """Collapse transitive chains to fixed points; reject cycles."""
    collapsed: dict[str, str] = {}
    for surface in raw:
        seen = {surface}
        current = surface
        while current in raw and raw[current] != current:
            current = raw[current]
            if current in seen:
                raise CycleError(
                    f"synonym chain starting at {surface!r} has no canonical fixed point"
                )
            seen.add(current)
        collapsed[surface] = current
    # canonical forms map to themselves
    for canon in set(collapsed.values()):
        collapsed.setdefault(canon, canon)
    return collapsed


def load_kg(triple_path: str, synonym_path: str | None = None) -> KnowledgeGraph:
    """Load tab-separated triples (and optionally synonyms) into a graph.

    Triple rows: subject <TAB> predicate <TAB> object [<TAB> source-tag].
    Synonym rows: surface <TAB> canonical. '#' lines are comments.
    """
    raw_synonyms: dict[str, str] = {}
    if synonym_path is not None:
        with open(synonym_path, "r", encoding="utf-8") as fh:
            for row, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ParseError(
                        f"synonym row needs exactly 2 tab-separated fields, got {len(parts)}",
                        line=row,
                    )
                surface, canon = (normalize_slot(p) for p in parts)
                if not surface or not canon:
                    raise ParseError("synonym row has an empty field", line=row)
                raw_synonyms[surface] = canon
    synonym_map = _collapse_synonyms(raw_synonyms)

    groups: dict[str, list[str]] = {}
    for surface, canon in synonym_map.items():
        groups.setdefault(canon, [])
        if surface not in groups[canon]:
            groups[canon].append(surface)
    synonym_groups = {
        canon: tuple(sorted(members)) for canon, members in groups.items()
    }

    triples: list[Triple] = []
    sources: list[str] = []
    index: dict[str, dict[str, list[int]]] = {}
    with open(triple_path, "r", encoding="utf-8") as fh:
        for row, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise ParseError(
                    f"triple row needs 3 or 4 tab-separated fields, got {len(parts)}",
                    line=row,
                )
            subject, predicate, objekt = (p.strip() for p in parts[:3])
            tag = parts[3].strip() if len(parts) == 4 else ""
            triple = Triple(
                subject=subject, predicate=predicate, object=objekt, provenance=RETRIEVED
            )
            if not triple.is_wellformed():
                raise ParseError("triple row has an empty slot", line=row)
            tid = len(triples)
            triples.append(triple)
            sources.append(tag)
            cs = synonym_map.get(normalize_slot(subject), normalize_slot(subject))
            cp = synonym_map.get(normalize_slot(predicate), normalize_slot(predicate))
            index.setdefault(cs, {}).setdefault(cp, []).append(tid)

    frozen_index = {
        cs: {cp: tuple(ids) for cp, ids in preds.items()} for cs, preds in index.items()
    }
    return KnowledgeGraph(
        triples=tuple(triples),
        sources=tuple(sources),
        index=frozen_index,
        synonym_map=synonym_map,
        synonym_groups=synonym_groups,
    )


def expand_synonyms(
    t: Triple, kg: KnowledgeGraph, max_expansions: int = DEFAULT_MAX_EXPANSIONS
) -> list[Triple]:
    """The original triple plus every synonym-substituted variant.

    Variants are the cartesian product of each slot's known surface
    forms, deduplicated, original first, capped at max_expansions.
    """
    slot_options: list[list[str]] = []
    for slot in (t.subject, t.predicate, t.object):
        norm = normalize_slot(slot)
        options = [slot]
        options.extend(s for s in kg.equivalents(slot) if s != norm)
        slot_options.append(options)

    variants: list[Triple] = [t]
    seen = {t.normalized()}
    for subject in slot_options[0]:
        for predicate in slot_options[1]:
            for objekt in slot_options[2]:
                if len(variants) >= max_expansions:
                    return variants
                variant = Triple(
                    subject=subject,
                    predicate=predicate,
                    object=objekt,
                    provenance=SYNONYM_EXPANDED,
                    answer_span=t.answer_span,
                )
                key = variant.normalized()
                if key not in seen:
                    seen.add(key)
                    variants.append(variant)
    return variants


def retrieve(
    t: Triple, kg: KnowledgeGraph, max_expansions: int = DEFAULT_MAX_EXPANSIONS
) -> RetrievalResult:
    """Look up stored triples matching any expanded query.

    Match rule: canonical subject AND canonical predicate equality.
    query_count is the number of index lookups performed.
    """
    started = time.perf_counter()
    expanded = expand_synonyms(t, kg, max_expansions=max_expansions)
    hit_ids: set[int] = set()
    query_count = 0
    for query in expanded:
        cs = kg.canonical(query.subject)
        cp = kg.canonical(query.predicate)
        query_count += 1
        hit_ids.update(kg.index.get(cs, {}).get(cp, ()))
    retrieved = tuple(kg.triples[i] for i in sorted(hit_ids))
    return RetrievalResult(
        query_triple=t,
        expanded_queries=tuple(expanded),
        retrieved=retrieved,
        query_count=query_count,
        elapsed=time.perf_counter() - started,
    )


def lookup(kg: KnowledgeGraph, subject: str, predicate: str) -> tuple[Triple, ...]:
    """Single canonical subject+predicate lookup (debugging helper)."""
    cs = kg.canonical(subject)
    cp = kg.canonical(predicate)
    ids = kg.index.get(cs, {}).get(cp, ())
    return tuple(kg.triples[i] for i in ids)
