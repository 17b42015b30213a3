"""Command line entry points: make-toy writes a small random model,
export runs a prompt through a model and dumps its KV cache."""

from __future__ import annotations

import argparse
import json
import sys

from .capture import ExportSpec, bundled_prompt, export, make_toy
from .errors import ExportError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvexport")
    sub = parser.add_subparsers(dest="command", required=True)

    toy = sub.add_parser("make-toy", help="save a tiny random model")
    toy.add_argument("--out", required=True)
    toy.add_argument("--seed", type=int, default=0)
    toy.add_argument("--num-layers", type=int, default=2)
    toy.add_argument("--num-q-heads", type=int, default=4)
    toy.add_argument("--num-kv-heads", type=int, default=1)
    toy.add_argument("--head-dim", type=int, default=16)
    toy.add_argument("--vocab-size", type=int, default=512)

    exp = sub.add_parser("export", help="dump a model's KV cache to a KVD file")
    exp.add_argument("--model", required=True)
    exp.add_argument("--out", required=True)
    exp.add_argument("--prompt", default=None, help="inline prompt text")
    exp.add_argument("--prompt-file", default=None)
    exp.add_argument("--max-tokens", type=int, default=32)
    exp.add_argument("--capture", choices=("pre_rope", "post_rope"),
                     default="pre_rope")
    exp.add_argument("--dtype", choices=("f32", "f16", "bf16"), default="f32")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "make-toy":
            make_toy(args.out, seed=args.seed, num_layers=args.num_layers,
                     num_q_heads=args.num_q_heads,
                     num_kv_heads=args.num_kv_heads, head_dim=args.head_dim,
                     vocab_size=args.vocab_size)
            print(json.dumps({"saved": args.out}))
        else:
            if args.prompt is not None:
                text = args.prompt
            elif args.prompt_file is not None:
                text = open(args.prompt_file, encoding="utf-8").read()
            else:
                text = bundled_prompt()
            spec = ExportSpec(model_path=args.model, out_path=args.out,
                              prompt=text, max_tokens=args.max_tokens,
                              capture=args.capture, dtype=args.dtype)
            print(json.dumps(export(spec), sort_keys=True))
    except ExportError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
