"""Command line for the trace exporter."""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, ExportSettings, export_trace


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trace-exporter",
        description="Generate from a causal LM and dump per-token layer distributions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    ex = sub.add_parser("export", help="run one generation and write the trace file")
    ex.add_argument("--model", required=True, help="model id or local path")
    group = ex.add_mutually_exclusive_group(required=True)
    group.add_argument("--prompt")
    group.add_argument("--prompt-file")
    ex.add_argument("--top-k", type=int, default=64)
    ex.add_argument("--layers", help="comma-separated candidate layer indices")
    ex.add_argument("--max-new-tokens", type=int, default=32)
    ex.add_argument("--out", required=True)
    ex.add_argument("--debug-full-row", type=int, default=None, metavar="IDX")
    ex.add_argument("--no-final-norm", action="store_true",
                    help="read intermediate layers without the final layer norm")
    ex.add_argument("--sample", action="store_true", help="sample instead of greedy decoding")
    ex.add_argument("--temperature", type=float, default=1.0)
    ex.add_argument("--seed", type=int, default=0)
    ex.add_argument("--device", default="cpu")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.prompt_file:
        try:
            with open(args.prompt_file, "r", encoding="utf-8") as fh:
                prompt = fh.read().strip()
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    else:
        prompt = args.prompt

    layers = None
    if args.layers:
        layers = [int(x) for x in args.layers.split(",") if x.strip()]
    settings = ExportSettings(
        model=args.model,
        out_path=args.out,
        top_k=args.top_k,
        candidate_layers=layers,
        max_new_tokens=args.max_new_tokens,
        greedy=not args.sample,
        temperature=args.temperature,
        seed=args.seed,
        apply_final_norm=not args.no_final_norm,
        debug_full_row=args.debug_full_row,
        device=args.device,
    )
    try:
        result = export_trace(prompt, settings)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {result.num_tokens} tokens to {result.path}")
    if result.debug_row_path:
        print(f"debug full row: {result.debug_row_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
