"""Command line: dumpexport --spec job.json, or flags mirroring the spec fields."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from dumpexporter.archs import registered_archs
from dumpexporter.export import export
from dumpexporter.spec import ExportError, ExportSpec


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dumpexport",
        description="Export a frozen torch classifier checkpoint to a dump directory",
    )
    parser.add_argument("--spec", help="JSON file with ExportSpec fields; flags override")
    parser.add_argument("--checkpoint")
    parser.add_argument("--arch", choices=registered_archs())
    parser.add_argument("--source", help="image folder or named split like cifar10:test")
    parser.add_argument("--role", choices=("fit", "id_test", "ood"))
    parser.add_argument("--output")
    parser.add_argument("--name", default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--device", default=None)
    parser.add_argument("--image-size", type=int, default=None)
    parser.add_argument("--data-root", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    raw: dict = {}
    if args.spec:
        raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    for field in ("checkpoint", "arch", "source", "role", "output", "name", "device",
                  "data_root"):
        val = getattr(args, field)
        if val is not None:
            raw[field] = val
    if args.batch_size is not None:
        raw["batch_size"] = args.batch_size
    if args.image_size is not None:
        raw["image_size"] = args.image_size

    try:
        spec = ExportSpec.from_json_obj(raw)
        result = export(spec)
    except (ExportError, FileNotFoundError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(
        f"wrote {result.path} (n={result.n_samples}, K={result.n_classes}, "
        f"D={result.feat_dim})"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
