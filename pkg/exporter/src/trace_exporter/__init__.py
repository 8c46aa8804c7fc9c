"""trace-exporter: dump per-token layer distributions from a causal LM as a trace file."""

from .export import ExportError, ExportResult, ExportSettings, default_candidate_layers, export_trace

__version__ = "0.1.0"

__all__ = [
    "ExportError",
    "ExportResult",
    "ExportSettings",
    "default_candidate_layers",
    "export_trace",
]
