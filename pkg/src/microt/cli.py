"""Command-line driver.

    microt run --config run.ini --out results/          # every stage
    microt run --config run.ini --stage infer --out results/
    microt distill --config run.ini --out results/      # one stage by name
    microt init-config > run.ini
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .pipeline import STAGES, PipelineConfig, PipelineError, run_pipeline


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI configuration file (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out", type=Path, default=Path("microt-out"), help="artifact directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="microt", description="Self-supervised tiny-model training and staged inference")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="run all stages, or one with --stage")
    run.add_argument("--stage", choices=STAGES, help="run only this stage")
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    sub.add_parser("init-config", help="print the default configuration")
    return p


def _load_config(args) -> tuple[PipelineConfig, Path | None]:
    if args.config is None:
        cfg, base = PipelineConfig(), None
    else:
        cfg, base = PipelineConfig.load(args.config), args.config.parent
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg, base


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "init-config":
        sys.stdout.write(PipelineConfig().to_ini())
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg, base = _load_config(args)
    except (OSError, ValueError) as exc:
        print(f"microt: bad configuration: {exc}", file=sys.stderr)
        return 2
    if args.command == "run":
        stages = (args.stage,) if args.stage else STAGES
    else:
        stages = (args.command,)
    try:
        run_pipeline(cfg, args.out, stages, base)
    except PipelineError as exc:
        print(f"microt: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
