#!/usr/bin/env python3
"""Run the desk-scale experiment end to end and print the results table.

Equivalent to `distillseg run --config configs/desk.json`; kept as a script
so the whole experiment is reproducible with one command from a clean
checkout. Expect roughly 5-10 minutes on a laptop CPU.
"""

import argparse
import sys
import time
from pathlib import Path

from distillseg.pipeline import run_pipeline
from distillseg.reporting import emit_table

REPO_ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--config", default=str(REPO_ROOT / "configs" / "desk.json"),
        help="experiment config (default: configs/desk.json)",
    )
    parser.add_argument("--run-id", default=None)
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()

    start = time.monotonic()
    result = run_pipeline(args.config, run_id=args.run_id, seed=args.seed)
    elapsed = time.monotonic() - start

    print(emit_table(result.manifest))
    stages = ", ".join(result.executed) if result.executed else "none (all cached)"
    print(f"stages executed: {stages}")
    print(f"wall time: {elapsed:.0f}s")
    print(f"manifest: {result.manifest_path}")
    print(f"plots: {result.manifest_path.parent / 'plots'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
