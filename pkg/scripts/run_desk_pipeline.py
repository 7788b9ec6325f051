#!/usr/bin/env python3
"""Run the full desk benchmark and print the accuracy matrix.

Usage:
    python scripts/run_desk_pipeline.py [--out DIR] [--set KEY=VALUE ...]
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from morelab.evaluation import render_report
from morelab.experiment import run_experiment

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.toml"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(CONFIG))
    parser.add_argument("--out", default=None)
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    args = parser.parse_args()

    t0 = time.perf_counter()
    report = run_experiment(args.config, out_dir=args.out, overrides=args.overrides)
    print(f"\npipeline wall time: {time.perf_counter() - t0:.0f}s\n")
    print(render_report(report, "markdown"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
