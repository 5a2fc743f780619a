"""Run the simulation with each candidate-mapper variant and rank them by CMRR.

Usage: python scripts/compare_mappers.py [--config CONFIG] [--out DIR]

Defaults to the bundled fixture city. Writes one run directory per variant
plus ``cmrr.csv`` and prints the per-metric JSD table.
"""

import argparse
import json
from dataclasses import replace
from importlib.resources import files
from pathlib import Path

from mobsim.config import load_config
from mobsim.metrics import MetricReport, cmrr
from mobsim.pipeline import Run, run_stage

VARIANTS = ("S", "M", "E")
PREREQS = ("ingest", "extract", "synthesize-patterns", "anchors", "build-graph")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(files("mobsim") / "fixtures" / "config.yaml"))
    ap.add_argument("--out", default="out/compare_mappers")
    args = ap.parse_args()

    base = load_config(args.config)
    out = Path(args.out)
    reports = {}
    for v in VARIANTS:
        cfg = replace(base, mapper=replace(base.mapper, variant=v)).with_overrides(output_dir=str(out / v))
        run = Run(cfg)
        for st in (*PREREQS, "simulate", "evaluate"):
            run_stage(run, st)
        data = json.loads((out / v / "evaluate" / "report.json").read_text(encoding="utf-8"))
        data.pop("tvr", None)
        reports[v] = MetricReport(**data)

    table = cmrr(reports)
    table.write_csv(out / "cmrr.csv")
    print("variant " + " ".join(f"{m:>8}" for m in table.metrics) + "     cmrr")
    for v in VARIANTS:
        row = " ".join(f"{getattr(reports[v], m):8.4f}" for m in table.metrics)
        print(f"{v:<7} {row} {table.cmrr[v]:8.3f}")


if __name__ == "__main__":
    main()
