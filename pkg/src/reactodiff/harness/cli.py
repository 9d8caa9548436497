"""Command line: ``reactodiff run|validate|schema``."""
from __future__ import annotations

import argparse
import json
import os
import sys

from ..errors import ConfigInvalid, ReactoDiffError
from .config import load_config, schema
from .experiments import run_experiment
from .report import emit_report


def _threads(arg: int | None) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("REACTODIFF_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigInvalid("REACTODIFF_THREADS", f"not an integer: {env!r}") from None
    return 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="reactodiff", description="Reaction-diffusion solver and estimate audits.")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment and write its report")
    run.add_argument("--config", required=True, help="JSON experiment config")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int, default=None, help="override run.master_seed")
    run.add_argument("--threads", type=int, default=None,
                     help="worker threads for ensembles (default: $REACTODIFF_THREADS or 1)")
    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("--config", required=True)
    sub.add_parser("schema", help="print the config JSON schema")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "schema":
            print(json.dumps(schema(), indent=2))
            return 0
        cfg = load_config(args.config)
        if args.command == "validate":
            print(f"ok: {cfg.run.kind}")
            return 0
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        bundle = run_experiment(cfg, threads=_threads(args.threads))
        emit_report(bundle, args.out)
    except ConfigInvalid as exc:
        print(f"config invalid: {exc}", file=sys.stderr)
        return 2
    except ReactoDiffError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 3
    for a in bundle.audits:
        print(f"{'PASS' if a['passed'] else 'FAIL'} {a['name']}")
    print(f"report written to {args.out}")
    return 0 if bundle.passed else 1


if __name__ == "__main__":
    sys.exit(main())
