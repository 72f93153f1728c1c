"""Command line entry point: ``vgi-align <stage> --config PATH``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .pipeline import STAGES, OrderingError, StageError, run, run_report

EXIT_OK, EXIT_VALIDATION, EXIT_STAGE, EXIT_ORDERING = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vgi-align", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        sp.add_argument("--config", required=needs_config, type=Path)
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config key, e.g. pipeline.balance_threshold=5000")

    v = sub.add_parser("validate", help="check a config file and report every problem")
    common(v)
    for stage in (*STAGES, "all"):
        sp = sub.add_parser(stage, help="run every enabled stage in order" if stage == "all" else f"run the {stage} stage")
        common(sp)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, help="run directory (default: out_dir from the config)")
    r = sub.add_parser("report", help="write stage count table and figures for a run directory")
    r.add_argument("--out", type=Path, required=True)
    d = sub.add_parser("default-config", help="print the shipped default config")
    d.add_argument("--output", type=Path)
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.command == "default-config":
        text = config_mod.default_config_text()
        if args.output:
            args.output.write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
        return EXIT_OK
    if args.command == "report":
        tsv, png = run_report(args.out)
        print(f"wrote {tsv}\nwrote {png}")
        return EXIT_OK

    overrides = list(args.override)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"pipeline.rng_seed={args.seed}")
    try:
        cfg, errors = config_mod.validate(args.config, overrides)
    except (OSError, config_mod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if errors:
        for e in errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.command == "validate":
        print(f"{args.config}: ok")
        return EXIT_OK

    stages = [args.command]
    if args.command == "all":
        stages = [s for s in STAGES if cfg.stages.get(s, True)]
    try:
        for stage in stages:
            manifest = run(cfg, stage, args.out)
            print(json.dumps({"stage": stage, "status": manifest["status"], "counts": manifest["counts"]}))
    except OrderingError as exc:
        print(f"ordering error: {exc}", file=sys.stderr)
        return EXIT_ORDERING
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
