"""Generation-trace data model and JSONL loader.

A trace is the engine's only coupling to the model that produced an
answer: one header line followed by one line per generated token, each
carrying the truncated final-layer distribution and, optionally,
truncated distributions read out at candidate intermediate layers.

Offsets are byte offsets into the UTF-8 encoding of the answer string;
subword tokenizers that encode leading spaces are tolerated by checking
token concatenation only up to whitespace.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .errors import ParseError, ValidationError

MASS_TOLERANCE = 1e-6
MAX_PROB_TOLERANCE = 1e-9


def answer_slice(answer: str, start: int, end: int) -> str:
    """Return the answer substring at a byte span."""
    return answer.encode("utf-8")[start:end].decode("utf-8", errors="replace")


def _squash_ws(text: str) -> str:
    return "".join(text.split())


@dataclass(frozen=True)
class SparseDistribution:
    """Truncated next-token distribution: top entries plus residual mass.

    Exporters may additionally record the exact entropy and exact max
    probability computed from the full row before truncation, so the
    simplest criteria stay exact despite truncation.
    """

    top_entries: tuple[tuple[int, float], ...]
    residual_mass: float = 0.0
    exact_entropy: float | None = None
    exact_max_prob: float | None = None

    def validate(self) -> None:
        total = sum(p for _, p in self.top_entries) + self.residual_mass
        if not (1.0 - MASS_TOLERANCE <= total <= 1.0 + MASS_TOLERANCE):
            raise ValidationError(
                "distribution mass must sum to 1",
                f"top entries + residual sum to {total!r}",
            )
        if not 0.0 <= self.residual_mass < 1.0:
            raise ValidationError(
                "residual_mass must lie in [0, 1)", repr(self.residual_mass)
            )
        ids = [tid for tid, _ in self.top_entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("token ids must be distinct")
        probs = [p for _, p in self.top_entries]
        if any(not 0.0 < p <= 1.0 for p in probs):
            raise ValidationError("probabilities must lie in (0, 1]")
        if any(a < b for a, b in zip(probs, probs[1:])):
            raise ValidationError("probabilities must be sorted non-increasing")
        if self.exact_entropy is not None and self.exact_entropy < 0.0:
            raise ValidationError("exact_entropy must be nonnegative")
        if self.exact_max_prob is not None:
            if not probs:
                raise ValidationError(
                    "exact_max_prob requires at least one top entry"
                )
            if abs(self.exact_max_prob - probs[0]) > MAX_PROB_TOLERANCE:
                raise ValidationError(
                    "exact_max_prob must equal the top entry probability",
                    f"{self.exact_max_prob!r} vs {probs[0]!r}",
                )


@dataclass(frozen=True)
class TraceHeader:
    model_name: str
    vocab_size: int
    num_layers: int
    candidate_layers: tuple[int, ...]
    question: str
    answer: str

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ValidationError("vocab_size must be >= 2", repr(self.vocab_size))
        if self.num_layers < 2:
            raise ValidationError("num_layers must be >= 2", repr(self.num_layers))
        for j in self.candidate_layers:
            if not 1 <= j <= self.num_layers - 1:
                raise ValidationError(
                    "candidate layers must lie in [1, num_layers - 1]", repr(j)
                )
        if any(
            a >= b for a, b in zip(self.candidate_layers, self.candidate_layers[1:])
        ):
            raise ValidationError("candidate layers must be strictly increasing")


@dataclass(frozen=True)
class TokenRecord:
    idx: int
    token_text: str
    char_start: int
    char_end: int
    sentence_id: int
    final_dist: SparseDistribution
    layer_dists: dict[int, SparseDistribution] = field(default_factory=dict)


@dataclass(frozen=True)
class GenerationTrace:
    header: TraceHeader
    tokens: tuple[TokenRecord, ...]

    def validate(self) -> None:
        self.header.validate()
        if not self.tokens:
            raise ValidationError("trace must contain at least one token")
        candidate = set(self.header.candidate_layers)
        prev_end = 0
        prev_sentence = 0
        for tok in self.tokens:
            tok.final_dist.validate()
            for layer, dist in tok.layer_dists.items():
                if layer not in candidate:
                    raise ValidationError(
                        "layer_dists keys must appear in candidate_layers",
                        f"token {tok.idx} has layer {layer}",
                    )
                dist.validate()
            if tok.char_start > tok.char_end:
                raise ValidationError(
                    "char span must be non-empty ordered", f"token {tok.idx}"
                )
            if tok.char_start < prev_end:
                raise ValidationError(
                    "char spans must be non-overlapping and non-decreasing",
                    f"token {tok.idx} starts at {tok.char_start} before {prev_end}",
                )
            if tok.sentence_id < prev_sentence:
                raise ValidationError(
                    "sentence_id must be non-decreasing",
                    f"token {tok.idx}",
                )
            prev_end = tok.char_end
            prev_sentence = tok.sentence_id
        concat = "".join(tok.token_text for tok in self.tokens)
        if _squash_ws(concat) != _squash_ws(self.header.answer):
            raise ValidationError(
                "token texts must concatenate to the answer text",
                "mismatch after whitespace normalization",
            )

    @property
    def answer(self) -> str:
        return self.header.answer


def _dist_from_obj(obj: dict, where: str, line: int) -> SparseDistribution:
    try:
        topk = tuple((int(tid), float(p)) for tid, p in obj["topk"])
        residual = float(obj.get("residual", 0.0))
        exact_entropy = obj.get("exact_entropy")
        exact_max_prob = obj.get("exact_max_prob")
        return SparseDistribution(
            top_entries=topk,
            residual_mass=residual,
            exact_entropy=None if exact_entropy is None else float(exact_entropy),
            exact_max_prob=None if exact_max_prob is None else float(exact_max_prob),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed {where} distribution ({exc})", line=line)


def load_trace(path: str) -> GenerationTrace:
    """Load and validate a JSONL trace file.

    Raises ParseError (with the offending line number), ValidationError
    (naming the violated invariant), or OSError for I/O failures.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise ParseError("empty trace file", line=1)

    try:
        head_obj = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid header object ({exc.msg})", line=1)
    try:
        header = TraceHeader(
            model_name=str(head_obj["model_name"]),
            vocab_size=int(head_obj["vocab_size"]),
            num_layers=int(head_obj["num_layers"]),
            candidate_layers=tuple(int(j) for j in head_obj["candidate_layers"]),
            question=str(head_obj["question"]),
            answer=str(head_obj["answer"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed header ({exc})", line=1)

    tokens: list[TokenRecord] = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid token record ({exc.msg})", line=lineno)
        try:
            layer_objs = obj.get("layers", {})
            layers = {
                int(key): _dist_from_obj(val, f"layer {key}", lineno)
                for key, val in layer_objs.items()
            }
            tokens.append(
                TokenRecord(
                    idx=int(obj["idx"]),
                    token_text=str(obj["token"]),
                    char_start=int(obj["char_start"]),
                    char_end=int(obj["char_end"]),
                    sentence_id=int(obj["sentence_id"]),
                    final_dist=_dist_from_obj(obj["final"], "final", lineno),
                    layer_dists=layers,
                )
            )
        except ParseError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed token record ({exc})", line=lineno)

    for position, tok in enumerate(tokens):
        if tok.idx != position:
            raise ValidationError(
                "token idx must match its position",
                f"record {position} has idx {tok.idx}",
            )

    trace = GenerationTrace(header=header, tokens=tuple(tokens))
    trace.validate()
    return trace


def _dist_to_obj(dist: SparseDistribution) -> dict:
    obj: dict = {
        "topk": [[tid, p] for tid, p in dist.top_entries],
        "residual": dist.residual_mass,
    }
    if dist.exact_entropy is not None:
        obj["exact_entropy"] = dist.exact_entropy
    if dist.exact_max_prob is not None:
        obj["exact_max_prob"] = dist.exact_max_prob
    return obj


def serialize_trace(trace: GenerationTrace, path: str) -> None:
    """Write a trace back to the JSONL format load_trace consumes."""
    header = trace.header
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            json.dumps(
                {
                    "model_name": header.model_name,
                    "vocab_size": header.vocab_size,
                    "num_layers": header.num_layers,
                    "candidate_layers": list(header.candidate_layers),
                    "question": header.question,
                    "answer": header.answer,
                }
            )
            + "\n"
        )
        for tok in trace.tokens:
            fh.write(
                json.dumps(
                    {
                        "idx": tok.idx,
                        "token": tok.token_text,
                        "char_start": tok.char_start,
                        "char_end": tok.char_end,
                        "sentence_id": tok.sentence_id,
                        "final": _dist_to_obj(tok.final_dist),
                        "layers": {
                            str(layer): _dist_to_obj(dist)
                            for layer, dist in sorted(tok.layer_dists.items())
                        },
                    }
                )
                + "\n"
            )


def sentence_spans(trace: GenerationTrace) -> list[tuple[int, range]]:
    """Partition token indices into per-sentence ranges, in order."""
    spans: list[tuple[int, range]] = []
    start = 0
    for i in range(1, len(trace.tokens) + 1):
        if i == len(trace.tokens) or trace.tokens[i].sentence_id != trace.tokens[start].sentence_id:
            spans.append((trace.tokens[start].sentence_id, range(start, i)))
            start = i
    return spans


def uniform_entropy_bound(vocab_size: int) -> float:
    """Upper bound on next-token entropy: ln of the vocabulary size."""
    return math.log(vocab_size)
