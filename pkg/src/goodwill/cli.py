"""Command-line entry point: ``goodwill <command> --config PATH [options]``.

Exit status: 0 all tests pass, 2 config error, 3 numerical failure,
4 statistical test failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError
from .harness import COMMANDS, EXIT_CONFIG, load_config, run_command


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="goodwill",
        description="Stochastic goodwill model with delay: simulation, adjoints, "
                    "maximum-principle checks and spike descent.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, type=Path, help="JSON config document")
    ap.add_argument("--out", default=Path("out"), type=Path,
                    help="root directory for run artifacts (default: ./out)")
    ap.add_argument("--workers", type=int, default=None,
                    help="worker cap; results do not depend on it")
    ap.add_argument("--seed-override", type=int, default=None, metavar="S",
                    help="replace numerics.seed (changes the config digest)")
    ap.add_argument("--lenient", action="store_true",
                    help="drop unknown config keys instead of rejecting them")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = args.config.read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error [config]: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        # validate against the command actually being run
        doc = json.loads(text)
        if isinstance(doc, dict):
            doc["command"] = args.command
            text = json.dumps(doc)
    except json.JSONDecodeError:
        pass  # load_config reports it
    try:
        cfg = load_config(text, strict=not args.lenient)
        overrides = {}
        if args.workers is not None:
            overrides["numerics.workers"] = args.workers
        if args.seed_override is not None:
            overrides["numerics.seed"] = args.seed_override
        if overrides:
            cfg = cfg.replace(**overrides)
        art = run_command(cfg, out_root=args.out)
    except ConfigError as exc:
        print(f"error [config] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    s = art.summary
    if "error" in s:
        err = s["error"]
        print(f"error [{err['module']}] digest {s['config_digest'][:12]}: "
              f"{err['type']}: {err['message']}", file=sys.stderr)
    for name, t in sorted(s["tests"].items()):
        print(f"{'PASS' if t['passed'] else 'FAIL'}  {name}")
    print(f"{s['status']}  {art.out_dir}")
    return art.exit_code


if __name__ == "__main__":
    sys.exit(main())
