"""``routelens-export export --model <id|path> --family <gpt2|llama> --out <dir>``"""

from __future__ import annotations

import argparse
import sys

from .export import FAMILIES, ExportError, export, spot_check


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="routelens-export")
    sub = p.add_subparsers(dest="cmd", required=True)
    e = sub.add_parser("export", help="convert a checkpoint")
    e.add_argument("--model", required=True, help="Hugging Face id or local directory")
    e.add_argument("--family", required=True, choices=FAMILIES)
    e.add_argument("--out", required=True)
    e.add_argument("--keep-dtype", action="store_true", help="keep F16 weights instead of widening to F32")
    e.add_argument("--no-check", action="store_true", help="skip the 10-tensor spot check")
    args = p.parse_args(argv)
    try:
        manifest = export(args.model, args.family, args.out, keep_dtype=args.keep_dtype)
    except ExportError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    if not args.no_check:
        failures = spot_check(args.model, args.family, args.out, atol=0.0 if not args.keep_dtype else 1e-2)
        for f in failures:
            print(f"spot check: {f}", file=sys.stderr)
        if failures:
            return 3
    print(f"wrote {len(manifest.checksums)} files to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
