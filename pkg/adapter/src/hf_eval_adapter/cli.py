"""Command-line entry point: run the evaluator server on stdin/stdout."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .adapter import AdapterConfig
from .server import serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hf-eval-adapter", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("serve", help="answer the evaluator protocol on stdin/stdout")
    p.add_argument("--config", default=None, help="AdapterConfig JSON file (overrides flags)")
    p.add_argument("--model", default=None, help="model identifier or local directory")
    p.add_argument("--data", default=None, help="tokenized dev split (.npz)")
    p.add_argument("--test-data", default=None, dest="test_data")
    p.add_argument("--metric", default="accuracy", choices=["accuracy", "macro_f1"])
    p.add_argument("--device", default="cpu")
    p.add_argument("--max-examples", type=int, default=None, dest="max_examples")
    p.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.config:
        config = AdapterConfig.from_json(Path(args.config).read_text())
    else:
        if not args.model or not args.data:
            print("serve needs --config or both --model and --data", file=sys.stderr)
            return 2
        config = AdapterConfig(
            model=args.model,
            data=args.data,
            test_data=args.test_data,
            metric=args.metric,
            device=args.device,
            max_examples=args.max_examples,
            batch_size=args.batch_size,
            seed=args.seed,
        )
    serve(config)
    return 0


if __name__ == "__main__":
    sys.exit(main())
