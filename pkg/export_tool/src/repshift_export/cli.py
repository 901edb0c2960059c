"""Export-tool CLI: convert checkpoints, or train-and-export toy models."""

from __future__ import annotations

import argparse
import json
import sys

from .export import export_checkpoint
from .mapping import ExportError
from .training import TaskSpec, train_toy_model


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repshift-export",
        description="convert reference checkpoints into engine weight containers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="convert a torch checkpoint")
    p.add_argument("checkpoint", help="torch checkpoint (.pt) path")
    p.add_argument("--out", required=True, help="output container path")
    p.add_argument("--mapping", help="mapping table YAML (default: built-in)")
    p.add_argument("--no-probe", action="store_true",
                   help="skip the engine cross-validation probe")

    p = sub.add_parser("train", help="train a toy model and export it")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--items", type=int, default=128)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--width", type=int, default=32)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            manifest = export_checkpoint(
                args.checkpoint, args.out, mapping_path=args.mapping,
                run_probe_check=not args.no_probe,
            )
            probe = ("skipped" if manifest.probe_max_error is None
                     else f"max err {manifest.probe_max_error:.2e}")
            print(f"export: wrote {args.out}, digest "
                  f"{manifest.digest[:12]}, probe {probe}")
        else:
            spec = TaskSpec(n_classes=args.classes, n_items=args.items,
                            steps=args.steps, depth=args.depth,
                            width=args.width)
            summary = train_toy_model(args.seed, spec, args.out)
            print(f"train: accuracy {summary['train_accuracy']:.3f}, wrote "
                  f"{summary['container']} (digest {summary['digest'][:12]})")
        return 0
    except ExportError as exc:
        print(json.dumps({"error": {"category": "ExportError",
                                    "message": str(exc)}}), file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(json.dumps({"error": {"category": "FileNotFound",
                                    "message": str(exc)}}), file=sys.stderr)
        return 1


def console_entry() -> None:
    sys.exit(main())
