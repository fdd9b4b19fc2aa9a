"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import ConfigError, RunConfig, config_from_dict, parse_config, preset_names
from .runner import COMMANDS, run_command

OUT_ENV = "QNDSPIN_OUT"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _report("usage", EXIT_USAGE, "UsageError", message)
        raise SystemExit(EXIT_USAGE)


def _report(command, code, kind, message):
    err = {"status": "error", "command": command, "exit_code": code, "error_type": kind, "message": message}
    print(json.dumps(err), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qndspin", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file or bundled preset name")
        sp.add_argument("--out", help=f"output directory (else ${OUT_ENV}, else config)")
        sp.add_argument("--seed", type=int, help="override experiment.seed")
        sp.add_argument("--jobs", type=int, default=1, help="parallel scan points")
        sp.add_argument("--format", choices=["csv", "csv+svg"], help="override output.format")
        if name in ("filter", "spectrum"):
            sp.add_argument("--input", help="photocurrent CSV (time,I) instead of simulating")
    sub.add_parser("presets", help="list bundled preset configs")
    return parser


def load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else config_from_dict({})
    data = cfg.model_dump()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        data["experiment"]["seed"] = args.seed
    if args.format is not None:
        data["output"]["format"] = args.format
    return config_from_dict(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "presets":
        print("\n".join(preset_names()))
        return EXIT_OK
    try:
        cfg = load_config(args)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
    except ConfigError as exc:
        _report(args.command, EXIT_USAGE, "ConfigError", str(exc))
        return EXIT_USAGE
    out = args.out or os.environ.get(OUT_ENV) or cfg.output.directory
    try:
        manifest = run_command(args.command, cfg, out, jobs=args.jobs,
                               input_path=getattr(args, "input", None))
    except (OSError, ConfigError) as exc:
        _report(args.command, EXIT_USAGE, type(exc).__name__, str(exc))
        return EXIT_USAGE
    except Exception as exc:  # any module failure is reported, not traced
        _report(args.command, EXIT_NUMERIC, type(exc).__name__, str(exc))
        return EXIT_NUMERIC
    print(json.dumps({"status": "ok", "command": args.command, "out": str(out),
                      "config_hash": manifest.config_hash,
                      "files": [f["path"] for f in manifest.files]}))
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
