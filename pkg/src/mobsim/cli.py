"""Command-line entry point: `mobsim --config run.yaml --stage all`."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from .config import ConfigError, load_config
from .pipeline import STAGES, DependencyError, Run, run_all, run_stage

log = logging.getLogger("mobsim")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mobsim", description="Agentic mobility simulation pipeline and evaluation suite.")
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--stage", required=True, choices=(*STAGES, "all"))
    p.add_argument("--seed", type=int, default=None, help="override rng_seed")
    p.add_argument("--out", default=None, help="override output_dir")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _error_record(exc: BaseException, stage: str) -> dict:
    rec = {"status": "error", "stage": stage, "type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, DependencyError):
        rec["missing_artifact"] = str(exc.artifact)
    return rec


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.out)
        cfg.validate()
    except (ConfigError, OSError) as exc:
        print(json.dumps(_error_record(exc, args.stage)), file=sys.stderr)
        return 2
    run = Run(cfg)
    try:
        if args.stage == "all":
            results = run_all(run)
        else:
            results = {args.stage: run_stage(run, args.stage)}
    except Exception as exc:  # every failure becomes a machine-readable record
        log.debug("stage failed", exc_info=True)
        print(json.dumps(_error_record(exc, args.stage)), file=sys.stderr)
        return 1
    summary = {"status": "ok", "out": str(run.out), "stages": {k: v.get("summary", {}) for k, v in results.items()}}
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
