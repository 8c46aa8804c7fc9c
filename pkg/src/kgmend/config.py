"""Pipeline configuration: defaults, validation, flat-file parsing."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .uncertainty import CRITERIA, C_E
from .verify import SimilarityWeights

EXTRACTOR_RULES = "rules"
EXTRACTOR_EXTERNAL = "external"
EXTRACTOR_FALLBACK = "external-with-fallback"
SIMILARITY_LEXICAL = "lexical"
SIMILARITY_EXTERNAL = "external"


@dataclass(frozen=True)
class PipelineConfig:
    criteria: frozenset[str] = frozenset({C_E})
    fence_k: float = 1.5
    short_sentence_min: int = 4
    tau: float = 0.8
    weights: SimilarityWeights = field(default_factory=SimilarityWeights)
    max_expansions: int = 16
    extractor: str = EXTRACTOR_RULES
    extractor_endpoint: str | None = None
    similarity: str = SIMILARITY_LEXICAL
    similarity_endpoint: str | None = None
    refinement: bool = True
    parallelism: int = 1

    def validate(self) -> None:
        unknown = self.criteria - set(CRITERIA)
        if unknown:
            raise ValueError(f"unknown criteria: {sorted(unknown)}")
        if not self.criteria:
            raise ValueError("at least one criterion must be selected")
        if self.fence_k <= 0:
            raise ValueError("fence_k must be positive")
        if self.short_sentence_min < 1:
            raise ValueError("short_sentence_min must be >= 1")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        self.weights.validate()
        if self.max_expansions < 1:
            raise ValueError("max_expansions must be >= 1")
        if self.extractor not in (EXTRACTOR_RULES, EXTRACTOR_EXTERNAL, EXTRACTOR_FALLBACK):
            raise ValueError(f"unknown extractor mode {self.extractor!r}")
        if self.extractor != EXTRACTOR_RULES and not self.extractor_endpoint:
            raise ValueError("external extractor modes require extractor_endpoint")
        if self.similarity not in (SIMILARITY_LEXICAL, SIMILARITY_EXTERNAL):
            raise ValueError(f"unknown similarity mode {self.similarity!r}")
        if self.similarity == SIMILARITY_EXTERNAL and not self.similarity_endpoint:
            raise ValueError("external similarity mode requires similarity_endpoint")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")

    def to_dict(self) -> dict:
        return {
            "criteria": sorted(self.criteria),
            "fence_k": self.fence_k,
            "short_sentence_min": self.short_sentence_min,
            "tau": self.tau,
            "w_subject": self.weights.subject,
            "w_predicate": self.weights.predicate,
            "w_object": self.weights.object,
            "max_expansions": self.max_expansions,
            "extractor": self.extractor,
            "extractor_endpoint": self.extractor_endpoint,
            "similarity": self.similarity,
            "similarity_endpoint": self.similarity_endpoint,
            "refinement": "on" if self.refinement else "off",
            "parallelism": self.parallelism,
        }


def _parse_bool(value: str, key: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("on", "true", "yes", "1"):
        return True
    if lowered in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"{key} must be on/off, got {value!r}")


def apply_config_entries(base: PipelineConfig, entries: dict[str, str]) -> PipelineConfig:
    """Overlay flat key=value entries on a config (CLI flags and files share this)."""
    cfg = base
    weights = cfg.weights
    for key, value in entries.items():
        value = value.strip()
        if key == "criteria":
            parts = frozenset(p.strip() for p in value.split(",") if p.strip())
            cfg = replace(cfg, criteria=parts)
        elif key == "fence_k":
            cfg = replace(cfg, fence_k=float(value))
        elif key == "short_sentence_min":
            cfg = replace(cfg, short_sentence_min=int(value))
        elif key == "tau":
            cfg = replace(cfg, tau=float(value))
        elif key == "w_subject":
            weights = replace(weights, subject=float(value))
        elif key == "w_predicate":
            weights = replace(weights, predicate=float(value))
        elif key == "w_object":
            weights = replace(weights, object=float(value))
        elif key == "max_expansions":
            cfg = replace(cfg, max_expansions=int(value))
        elif key == "extractor":
            cfg = replace(cfg, extractor=value)
        elif key == "extractor_endpoint":
            cfg = replace(cfg, extractor_endpoint=value or None)
        elif key == "similarity":
            cfg = replace(cfg, similarity=value)
        elif key == "similarity_endpoint":
            cfg = replace(cfg, similarity_endpoint=value or None)
        elif key == "refinement":
            cfg = replace(cfg, refinement=_parse_bool(value, key))
        elif key == "parallelism":
            cfg = replace(cfg, parallelism=int(value))
        else:
            raise ValueError(f"unknown config key {key!r}")
    return replace(cfg, weights=weights)


def load_config_file(path: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse a flat key = value config file ('#' starts a comment)."""
    entries: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"line {lineno}: expected key = value, got {line.rstrip()!r}")
            key, _, value = stripped.partition("=")
            entries[key.strip()] = value.strip()
    cfg = apply_config_entries(base or PipelineConfig(), entries)
    cfg.validate()
    return cfg
