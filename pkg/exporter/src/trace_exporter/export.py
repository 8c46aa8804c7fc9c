"""Generate an answer with a causal LM and dump a per-token trace file.

For every generated token the final-layer next-token distribution is
truncated to the top-k entries plus residual mass; exact entropy and
exact max probability are computed from the full row first, so the
truncation never degrades them. Candidate intermediate layers are read
out early-exit style: the hidden state at layer j is pushed through the
model's output head (optionally through the final layer norm first,
which is how contrastive-decoding setups derive their per-layer
distributions).
"""

from __future__ import annotations

import json
import math
import os
import re
import tempfile
from dataclasses import dataclass, field

import torch
from transformers import AutoModelForCausalLM, AutoTokenizer

from .selfcheck import SelfCheckError, check_trace_file


class ExportError(Exception):
    pass


@dataclass
class ExportSettings:
    model: str
    out_path: str
    top_k: int = 64
    candidate_layers: list[int] | None = None
    max_new_tokens: int = 32
    greedy: bool = True
    temperature: float = 1.0
    seed: int = 0
    apply_final_norm: bool = True
    debug_full_row: int | None = None
    device: str = "cpu"

    def validate(self) -> None:
        if self.top_k < 1:
            raise ExportError("top_k must be >= 1")
        if self.max_new_tokens < 1:
            raise ExportError("max_new_tokens must be >= 1")
        if not self.greedy and self.temperature <= 0:
            raise ExportError("sampling requires a positive temperature")


@dataclass
class ExportResult:
    path: str
    answer: str
    num_tokens: int
    candidate_layers: list[int]
    debug_row_path: str | None = None


def default_candidate_layers(num_layers: int) -> list[int]:
    """Even-indexed layers in the upper half; the last valid layer as fallback."""
    layers = [j for j in range(num_layers // 2, num_layers) if j % 2 == 0 and 1 <= j <= num_layers - 1]
    return layers or [max(1, num_layers - 1)]


def _final_norm_module(model) -> torch.nn.Module | None:
    for path in ("transformer.ln_f", "model.norm", "transformer.norm_f", "gpt_neox.final_layer_norm"):
        obj = model
        for attr in path.split("."):
            obj = getattr(obj, attr, None)
            if obj is None:
                break
        if obj is not None:
            return obj
    return None


_SENT_RE = re.compile(r"(?<=[.!?])\s+")


def _sentence_starts(text: str) -> list[int]:
    starts = [0]
    for m in _SENT_RE.finditer(text):
        starts.append(len(text[: m.end()].encode("utf-8")))
    return starts


def _truncate(probs: torch.Tensor, top_k: int) -> tuple[list[list], float, float, float]:
    """Top-k entries, residual mass, exact entropy, exact max prob."""
    row = probs.double()
    exact_max = float(row.max())
    nonzero = row[row > 0]
    exact_entropy = float(-(nonzero * nonzero.log()).sum())
    k = min(top_k, int((row > 0).sum()))
    top = torch.topk(row, k)
    entries = [[int(i), float(p)] for i, p in zip(top.indices, top.values) if float(p) > 0.0]
    residual = 1.0 - sum(p for _, p in entries)
    if residual < 1e-12:
        residual = 0.0
    return entries, residual, exact_entropy, exact_max


def _token_texts(tokenizer, ids: list[int]) -> tuple[str, list[str]]:
    """Answer text plus per-token pieces that concatenate to it exactly."""
    texts: list[str] = []
    prev = ""
    for i in range(1, len(ids) + 1):
        current = tokenizer.decode(ids[:i], skip_special_tokens=False)
        if current.startswith(prev):
            texts.append(current[len(prev):])
        else:
            # decoder rewrote the prefix; fall back to the raw token string
            texts.append(tokenizer.convert_ids_to_tokens([ids[i - 1]])[0])
            current = prev + texts[-1]
        prev = current
    return prev, texts


def export_trace(prompt: str, settings: ExportSettings) -> ExportResult:
    """Generate from the prompt and write the trace file atomically.

    The file is self-checked against the trace schema before the final
    rename; a failed check leaves no partial output behind.
    """
    settings.validate()
    try:
        tokenizer = AutoTokenizer.from_pretrained(settings.model)
        model = AutoModelForCausalLM.from_pretrained(settings.model)
    except Exception as exc:
        raise ExportError(f"could not load model {settings.model!r}: {exc}")
    model.to(settings.device)
    model.eval()

    num_layers = int(model.config.num_hidden_layers)
    candidate_layers = (
        list(settings.candidate_layers)
        if settings.candidate_layers is not None
        else default_candidate_layers(num_layers)
    )
    if any(not 1 <= j <= num_layers - 1 for j in candidate_layers):
        raise ExportError(
            f"candidate layers {candidate_layers} invalid for a {num_layers}-layer model"
        )
    if sorted(set(candidate_layers)) != candidate_layers:
        raise ExportError("candidate layers must be strictly increasing")

    head = model.get_output_embeddings()
    norm = _final_norm_module(model) if settings.apply_final_norm else None
    if settings.apply_final_norm and norm is None:
        raise ExportError("model exposes no recognizable final norm module")

    generator = torch.Generator(device=settings.device).manual_seed(settings.seed)
    encoded = tokenizer(prompt, return_tensors="pt").input_ids.to(settings.device)
    eos_id = tokenizer.eos_token_id

    generated: list[int] = []
    step_dists: list[tuple] = []
    with torch.no_grad():
        input_ids = encoded
        for _ in range(settings.max_new_tokens):
            out = model(input_ids, output_hidden_states=True)
            final_logits = out.logits[0, -1, :]
            final_probs = torch.softmax(final_logits.double(), dim=-1)
            if settings.greedy:
                next_id = int(final_probs.argmax())
            else:
                scaled = torch.softmax(final_logits.double() / settings.temperature, dim=-1)
                next_id = int(torch.multinomial(scaled, 1, generator=generator))
            if eos_id is not None and next_id == eos_id:
                break

            layer_rows = {}
            for j in candidate_layers:
                h = out.hidden_states[j][0, -1, :]
                if norm is not None:
                    h = norm(h)
                layer_rows[j] = torch.softmax(head(h).double(), dim=-1)
            step_dists.append((final_probs, layer_rows))
            generated.append(next_id)
            input_ids = torch.cat(
                [input_ids, torch.tensor([[next_id]], device=settings.device)], dim=1
            )

    if not generated:
        raise ExportError("generation produced no tokens before end-of-sequence")

    answer, token_texts = _token_texts(tokenizer, generated)
    starts = _sentence_starts(answer)
    norm_tag = "+lnf" if settings.apply_final_norm else "+nolnf"
    header = {
        "model_name": f"{settings.model}{norm_tag}",
        "vocab_size": int(model.config.vocab_size),
        "num_layers": num_layers,
        "candidate_layers": candidate_layers,
        "question": prompt,
        "answer": answer,
    }

    debug_row_path = None
    lines = [json.dumps(header)]
    byte_pos = 0
    for idx, (text, (final_probs, layer_rows)) in enumerate(zip(token_texts, step_dists)):
        tok_bytes = len(text.encode("utf-8"))
        char_start, char_end = byte_pos, byte_pos + tok_bytes
        byte_pos = char_end
        text_start = char_start + len(text) - len(text.lstrip())
        sentence_id = sum(1 for s in starts if s <= text_start) - 1

        entries, residual, exact_entropy, exact_max = _truncate(final_probs, settings.top_k)
        record = {
            "idx": idx,
            "token": text,
            "char_start": char_start,
            "char_end": char_end,
            "sentence_id": sentence_id,
            "final": {
                "topk": entries,
                "residual": residual,
                "exact_entropy": exact_entropy,
                "exact_max_prob": exact_max,
            },
            "layers": {},
        }
        for j, row in layer_rows.items():
            l_entries, l_residual, _, _ = _truncate(row, settings.top_k)
            record["layers"][str(j)] = {"topk": l_entries, "residual": l_residual}
        lines.append(json.dumps(record))

        if settings.debug_full_row is not None and idx == settings.debug_full_row:
            debug_row_path = settings.out_path + ".fullrow.json"
            with open(debug_row_path, "w", encoding="utf-8") as fh:
                json.dump(
                    {"idx": idx, "probs": [float(p) for p in final_probs]}, fh
                )

    if settings.debug_full_row is not None and debug_row_path is None:
        raise ExportError(
            f"debug_full_row index {settings.debug_full_row} exceeds the "
            f"{len(generated)} generated tokens"
        )

    out_dir = os.path.dirname(os.path.abspath(settings.out_path)) or "."
    os.makedirs(out_dir, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=out_dir, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        try:
            check_trace_file(tmp_name)
        except SelfCheckError as exc:
            raise ExportError(f"exported trace failed its schema self-check: {exc}")
        os.replace(tmp_name, settings.out_path)
    finally:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)

    return ExportResult(
        path=settings.out_path,
        answer=answer,
        num_tokens=len(generated),
        candidate_layers=candidate_layers,
        debug_row_path=debug_row_path,
    )
