"""Schema self-check run on every exported file before it is renamed into place.

Deliberately re-states the trace file contract instead of importing the
consumer package: the exporter must be able to vouch for its output on
machines where only the inference stack is installed.
"""

from __future__ import annotations

import json

MASS_TOL = 1e-6

_HEADER_KEYS = {"model_name", "vocab_size", "num_layers", "candidate_layers", "question", "answer"}
_TOKEN_KEYS = {"idx", "token", "char_start", "char_end", "sentence_id", "final"}


class SelfCheckError(Exception):
    pass


def _check_dist(obj: dict, where: str) -> None:
    if "topk" not in obj or "residual" not in obj:
        raise SelfCheckError(f"{where}: distribution needs topk and residual")
    probs = [p for _, p in obj["topk"]]
    ids = [tid for tid, _ in obj["topk"]]
    if len(set(ids)) != len(ids):
        raise SelfCheckError(f"{where}: duplicate token ids")
    if any(b > a for a, b in zip(probs, probs[1:])):
        raise SelfCheckError(f"{where}: probs not sorted non-increasing")
    if any(not 0.0 < p <= 1.0 for p in probs):
        raise SelfCheckError(f"{where}: probs outside (0, 1]")
    total = sum(probs) + obj["residual"]
    if not (1.0 - MASS_TOL <= total <= 1.0 + MASS_TOL):
        raise SelfCheckError(f"{where}: mass sums to {total!r}")


def check_trace_file(path: str) -> None:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SelfCheckError("file is empty")
    header = json.loads(lines[0])
    missing = _HEADER_KEYS - header.keys()
    if missing:
        raise SelfCheckError(f"header missing keys: {sorted(missing)}")
    candidate = set(header["candidate_layers"])
    if any(not 1 <= j <= header["num_layers"] - 1 for j in candidate):
        raise SelfCheckError("candidate layer outside [1, num_layers-1]")

    prev_end = 0
    prev_sentence = 0
    concat = []
    for n, line in enumerate(lines[1:]):
        tok = json.loads(line)
        missing = _TOKEN_KEYS - tok.keys()
        if missing:
            raise SelfCheckError(f"token {n} missing keys: {sorted(missing)}")
        if tok["idx"] != n:
            raise SelfCheckError(f"token {n} has idx {tok['idx']}")
        if tok["char_start"] < prev_end or tok["char_end"] < tok["char_start"]:
            raise SelfCheckError(f"token {n} span disordered")
        if tok["sentence_id"] < prev_sentence:
            raise SelfCheckError(f"token {n} sentence_id decreased")
        prev_end = tok["char_end"]
        prev_sentence = tok["sentence_id"]
        concat.append(tok["token"])
        _check_dist(tok["final"], f"token {n} final")
        for key, dist in tok.get("layers", {}).items():
            if int(key) not in candidate:
                raise SelfCheckError(f"token {n} has non-candidate layer {key}")
            _check_dist(dist, f"token {n} layer {key}")

    if not concat:
        raise SelfCheckError("no token records")
    if "".join("".join(concat).split()) != "".join(header["answer"].split()):
        raise SelfCheckError("token texts do not concatenate to the answer")
