"""Command-line entry point: ``tarc run|compare|validate``."""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

from .config import ConfigError, config_to_dict, parse_config


def _error_record(exc: BaseException, stage: str) -> dict:
    return {
        "status": "error",
        "stage": stage,
        "error": type(exc).__name__,
        "message": str(exc),
        "context": getattr(exc, "run_context", None),
    }


def _fail(record: dict, out_dir=None, code: int = 1) -> int:
    text = json.dumps(record, sort_keys=True)
    print(text, file=sys.stderr)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "error.json").write_text(text + "\n")
    return code


def cmd_validate(args) -> int:
    try:
        cfg = parse_config(args.config)
    except (ConfigError, OSError) as exc:
        return _fail(_error_record(exc, "validate"), code=2)
    print(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True))
    return 0


def cmd_run(args) -> int:
    from .runner import run

    try:
        cfg = parse_config(args.config)
    except (ConfigError, OSError) as exc:
        return _fail(_error_record(exc, "config"), code=2)
    out_dir = args.output_dir or cfg.output_dir
    try:
        written = run(cfg, out_dir)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable record
        record = _error_record(exc, "run")
        if args.verbose:
            record["traceback"] = traceback.format_exc()
        return _fail(record, out_dir)
    for name, path in written.items():
        print(f"{name}\t{path}")
    return 0


def cmd_compare(args) -> int:
    from .runner import compare

    try:
        written = compare(args.reports, args.output)
    except Exception as exc:  # noqa: BLE001
        return _fail(_error_record(exc, "compare"))
    print(Path(written["markdown"]).read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tarc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train and evaluate every configured method and seed")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="tabulate report aggregates with deltas versus the first")
    p.add_argument("reports", nargs="+")
    p.add_argument("-o", "--output", default=None, help="CSV path (a .md twin is written alongside)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("validate", help="parse a config and print it fully defaulted")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
