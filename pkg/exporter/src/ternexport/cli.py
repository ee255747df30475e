"""ternexport CLI: export and verify subcommands.

Exit codes: 0 success, 1 verification failures, 2 unusable inputs.
"""

from __future__ import annotations

import argparse
import json
import sys

from .container_io import ContainerError
from .export import ExportError, export_checkpoint, load_config, verify_export
from .mapping import MappingError, MappingSpec
from .safetensors_io import SafetensorsError


def cmd_export(args) -> int:
    try:
        mapping = MappingSpec.load(args.mapping)
        config = load_config(args.config)
        summary = export_checkpoint(args.source, mapping, config, args.out)
    except (OSError, json.JSONDecodeError, MappingError, ExportError, SafetensorsError) as e:
        print(f"error: export: {e}", file=sys.stderr)
        return 2
    print(f"wrote {args.out}: {summary['tensors']} tensors, {summary['bytes']} bytes")
    if summary["extra_destinations"]:
        print(f"note: {len(summary['extra_destinations'])} destinations beyond the config's needs")
    return 0


def cmd_verify(args) -> int:
    try:
        report = verify_export(args.source, args.container)
    except (OSError, MappingError, ContainerError, SafetensorsError) as e:
        print(f"error: verify: {e}", file=sys.stderr)
        return 2
    failures = 0
    for entry in report:
        status = "ok" if entry.ok else "FAIL"
        print(f"{status:>4}  {entry.dest}  <-  {entry.source}" + ("" if entry.ok else f"  ({entry.detail})"))
        failures += 0 if entry.ok else 1
    print(f"{len(report) - failures}/{len(report)} tensors verified")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ternexport", description="safetensors checkpoint -> ternmm f32 container"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    e = sub.add_parser("export", help="apply a mapping and write a container")
    e.add_argument("--source", required=True, help="directory of .safetensors shards")
    e.add_argument("--mapping", required=True, help="mapping rules JSON")
    e.add_argument("--config", required=True, help="target model config JSON")
    e.add_argument("--out", required=True, help="output container path")
    e.set_defaults(func=cmd_export)

    v = sub.add_parser("verify", help="compare a container against its source")
    v.add_argument("--source", required=True, help="directory of .safetensors shards")
    v.add_argument("--container", required=True, help="container written by export")
    v.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
