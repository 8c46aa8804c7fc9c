from __future__ import annotations

import random

import pytest

from kgmend import CycleError, ParseError, Triple, expand_synonyms, load_kg, retrieve
from kgmend.kg import lookup
from kgmend.triples import normalize_slot


def write_kg(tmp_path, rows, synonyms=None):
    kg_file = tmp_path / "kg.tsv"
    kg_file.write_text("".join("\t".join(r) + "\n" for r in rows), encoding="utf-8")
    syn_file = None
    if synonyms is not None:
        syn_file = tmp_path / "syn.tsv"
        syn_file.write_text(
            "".join(f"{s}\t{c}\n" for s, c in synonyms), encoding="utf-8"
        )
    return str(kg_file), (str(syn_file) if syn_file else None)


class TestLoadKg:
    def test_three_rows_indexed(self, tmp_path):
        rows = [
            ("flu", "treated with", "rest", "src"),
            ("flu", "caused by", "viruses", "src"),
            ("gout", "treated with", "urate lowering therapy", "src"),
        ]
        kg = load_kg(*write_kg(tmp_path, rows))
        assert len(kg) == 3
        for s, p, o, _ in rows:
            hits = lookup(kg, s, p)
            assert any(t.object == o for t in hits)

    def test_comments_and_blanks_ignored(self, tmp_path):
        kg_file = tmp_path / "kg.tsv"
        kg_file.write_text("# header\n\nflu\tis\tviral\tsrc\n", encoding="utf-8")
        assert len(load_kg(str(kg_file))) == 1

    def test_three_column_rows_allowed(self, tmp_path):
        kg_file = tmp_path / "kg.tsv"
        kg_file.write_text("flu\tis\tviral\n", encoding="utf-8")
        kg = load_kg(str(kg_file))
        assert kg.sources == ("",)

    def test_bad_arity_reports_row(self, tmp_path):
        kg_file = tmp_path / "kg.tsv"
        kg_file.write_text("flu\tis\tviral\tsrc\nflu\tis\n", encoding="utf-8")
        with pytest.raises(ParseError, match="line 2"):
            load_kg(str(kg_file))

    def test_empty_slot_reports_row(self, tmp_path):
        kg_file = tmp_path / "kg.tsv"
        kg_file.write_text("flu\t \tviral\tsrc\n", encoding="utf-8")
        with pytest.raises(ParseError, match="line 1"):
            load_kg(str(kg_file))

    def test_synonym_chain_collapses(self, tmp_path):
        paths = write_kg(tmp_path, [("c", "is", "thing", "src")], synonyms=[("a", "b"), ("b", "c")])
        kg = load_kg(*paths)
        assert kg.canonical("a") == "c"
        assert kg.canonical("b") == "c"
        assert kg.canonical("c") == "c"

    def test_synonym_cycle_rejected(self, tmp_path):
        paths = write_kg(tmp_path, [("x", "is", "y", "src")], synonyms=[("a", "b"), ("b", "a")])
        with pytest.raises(CycleError):
            load_kg(*paths)

    def test_canonical_is_fixed_point(self, tmp_path):
        synonyms = [("a", "b"), ("b", "c"), ("q", "c"), ("z", "w")]
        paths = write_kg(tmp_path, [("c", "is", "thing", "src")], synonyms=synonyms)
        kg = load_kg(*paths)
        for surface in ("a", "b", "c", "q", "z", "w", "unknown term"):
            assert kg.canonical(kg.canonical(surface)) == kg.canonical(surface)

    def test_bad_synonym_arity(self, tmp_path):
        kg_file = tmp_path / "kg.tsv"
        kg_file.write_text("flu\tis\tviral\n", encoding="utf-8")
        syn_file = tmp_path / "syn.tsv"
        syn_file.write_text("a\tb\tc\n", encoding="utf-8")
        with pytest.raises(ParseError, match="line 1"):
            load_kg(str(kg_file), str(syn_file))


class TestExpandSynonyms:
    def test_no_synonyms_returns_original_only(self, tmp_path):
        kg = load_kg(*write_kg(tmp_path, [("flu", "is", "viral", "s")]))
        t = Triple("flu", "treated with", "rest")
        assert expand_synonyms(t, kg) == [t]

    def test_two_by_two_cartesian(self, tmp_path):
        synonyms = [("influenza", "flu"), ("managed with", "treated with")]
        kg = load_kg(*write_kg(tmp_path, [("flu", "is", "viral", "s")], synonyms))
        t = Triple("flu", "treated with", "rest")
        variants = expand_synonyms(t, kg)
        assert len(variants) == 4
        assert variants[0] == t
        normalized = {v.normalized() for v in variants}
        assert ("influenza", "managed with", "rest") in normalized

    def test_cap_keeps_original_first(self, tmp_path):
        synonyms = [(f"alias{i}", "flu") for i in range(9)]
        kg = load_kg(*write_kg(tmp_path, [("flu", "is", "viral", "s")], synonyms))
        t = Triple("flu", "is", "viral")
        variants = expand_synonyms(t, kg, max_expansions=8)
        assert len(variants) == 8
        assert variants[0] == t

    def test_variants_deduplicated(self, tmp_path):
        synonyms = [("flu", "flu")]
        kg = load_kg(*write_kg(tmp_path, [("flu", "is", "viral", "s")], synonyms))
        t = Triple("flu", "is", "viral")
        variants = expand_synonyms(t, kg)
        assert len({v.normalized() for v in variants}) == len(variants)


class TestRetrieve:
    def test_absent_subject_empty(self, tmp_path):
        kg = load_kg(*write_kg(tmp_path, [("flu", "is", "viral", "s")]))
        result = retrieve(Triple("measles", "is", "viral"), kg)
        assert result.retrieved == ()
        assert result.query_count >= 1

    def test_object_mismatch_still_retrieves(self, tmp_path):
        kg = load_kg(*write_kg(tmp_path, [("x", "diagnosed by", "blood tests", "s")]))
        result = retrieve(Triple("x", "diagnosed by", "imaging"), kg)
        assert [t.object for t in result.retrieved] == ["blood tests"]

    def test_synonym_subject_reaches_kg_row(self, tmp_path):
        paths = write_kg(
            tmp_path,
            [("influenza", "treated with", "rest", "s")],
            synonyms=[("flu", "influenza")],
        )
        kg = load_kg(*paths)
        result = retrieve(Triple("flu", "treated with", "fluids"), kg)
        assert [t.object for t in result.retrieved] == ["rest"]

    def test_soundness(self, fixture_kg):
        queries = [
            Triple("addison disease", "diagnosed by", "anything"),
            Triple("hypocortisolism", "identified by", "anything"),
            Triple("lyme disease", "symptoms include", "whatever"),
        ]
        for q in queries:
            result = retrieve(q, fixture_kg)
            for hit in result.retrieved:
                assert any(
                    fixture_kg.canonical(hit.subject) == fixture_kg.canonical(e.subject)
                    and fixture_kg.canonical(hit.predicate) == fixture_kg.canonical(e.predicate)
                    for e in result.expanded_queries
                )

    def test_determinism(self, fixture_kg):
        q = Triple("addison disease", "diagnosed by", "urine culture")
        a = retrieve(q, fixture_kg)
        b = retrieve(q, fixture_kg)
        assert a.retrieved == b.retrieved
        assert a.query_count == b.query_count
        assert a.expanded_queries == b.expanded_queries

    def test_immutability(self, fixture_kg):
        before = (fixture_kg.triples, fixture_kg.index, fixture_kg.synonym_map.copy())
        retrieve(Triple("addison disease", "diagnosed by", "x"), fixture_kg)
        assert fixture_kg.triples == before[0]
        assert fixture_kg.index == before[1]
        assert fixture_kg.synonym_map == before[2]

    def test_matches_linear_scan_random(self, tmp_path):
        rng = random.Random(99)
        subjects = [f"subj{i}" for i in range(12)]
        predicates = ["is", "treats", "causes", "affects"]
        objects = [f"obj{i}" for i in range(20)]
        aliases = {f"alias{i}": rng.choice(subjects) for i in range(6)}
        rows = [
            (rng.choice(subjects), rng.choice(predicates), rng.choice(objects), "s")
            for _ in range(200)
        ]
        paths = write_kg(tmp_path, rows, synonyms=list(aliases.items()))
        kg = load_kg(*paths)

        def canon(text):
            n = normalize_slot(text)
            return aliases.get(n, n)

        for _ in range(100):
            q = Triple(
                rng.choice(subjects + list(aliases)),
                rng.choice(predicates),
                rng.choice(objects),
            )
            got = {t.normalized() for t in retrieve(q, kg).retrieved}
            expected = {
                Triple(s, p, o).normalized()
                for s, p, o, _ in rows
                if canon(s) == canon(q.subject) and canon(p) == canon(q.predicate)
            }
            assert got == expected
