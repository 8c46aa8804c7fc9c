from __future__ import annotations

import copy
import json
import os

import pytest

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
CORPUS_DIR = os.path.join(FIXTURES, "corpus")
TRACES_DIR = os.path.join(FIXTURES, "traces")
KG_PATH = os.path.join(FIXTURES, "kg.tsv")
SYNONYMS_PATH = os.path.join(FIXTURES, "synonyms.tsv")
MANIFEST_PATH = os.path.join(FIXTURES, "corpus_manifest.json")


@pytest.fixture(scope="session")
def manifest() -> list[dict]:
    with open(MANIFEST_PATH, "r", encoding="utf-8") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def fixture_kg():
    from kgmend import load_kg

    return load_kg(KG_PATH, SYNONYMS_PATH)


@pytest.fixture
def valid_trace_doc() -> list[dict]:
    """A known-good trace document for perturbation tests (deep copy per test)."""
    doc = [
        {
            "model_name": "perturb-fixture",
            "vocab_size": 32,
            "num_layers": 6,
            "candidate_layers": [3, 5],
            "question": "Q?",
            "answer": "Cats purr. Dogs bark loudly.",
        },
        {"idx": 0, "token": "Cats", "char_start": 0, "char_end": 4, "sentence_id": 0,
         "final": {"topk": [[1, 0.8], [2, 0.2]], "residual": 0.0},
         "layers": {"3": {"topk": [[1, 0.8], [2, 0.2]], "residual": 0.0}}},
        {"idx": 1, "token": " purr", "char_start": 4, "char_end": 9, "sentence_id": 0,
         "final": {"topk": [[4, 1.0]], "residual": 0.0}, "layers": {}},
        {"idx": 2, "token": ".", "char_start": 9, "char_end": 10, "sentence_id": 0,
         "final": {"topk": [[5, 0.5], [6, 0.3]], "residual": 0.2}, "layers": {}},
        {"idx": 3, "token": " Dogs", "char_start": 10, "char_end": 15, "sentence_id": 1,
         "final": {"topk": [[7, 0.9], [8, 0.1]], "residual": 0.0}, "layers": {}},
        {"idx": 4, "token": " bark", "char_start": 15, "char_end": 20, "sentence_id": 1,
         "final": {"topk": [[9, 1.0]], "residual": 0.0}, "layers": {}},
        {"idx": 5, "token": " loudly", "char_start": 20, "char_end": 27, "sentence_id": 1,
         "final": {"topk": [[3, 1.0]], "residual": 0.0}, "layers": {}},
        {"idx": 6, "token": ".", "char_start": 27, "char_end": 28, "sentence_id": 1,
         "final": {"topk": [[5, 1.0]], "residual": 0.0}, "layers": {}},
    ]
    return copy.deepcopy(doc)


def write_doc(path, doc: list[dict]) -> str:
    with open(path, "w", encoding="utf-8") as fh:
        for obj in doc:
            fh.write(json.dumps(obj) + "\n")
    return str(path)
