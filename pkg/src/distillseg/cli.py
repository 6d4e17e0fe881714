"""Batch command-line interface: every subcommand reads the same config file.

Stages already completed for the run id are skipped, so the subcommands
compose naturally: `gen-data` then `train` then `distill` does no repeated
work, and `run` executes whatever is still missing.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import load_config
from .errors import DistillsegError
from .pipeline import Pipeline
from .reporting import emit_csv, emit_plots, emit_table

_SUBCOMMAND_TARGET = {
    "gen-data": "gen_data",
    "split": "split",
    "train": "train_cascaded_unet3d",
    "evaluate": "evaluate_cascaded_unet3d",
    "ensemble": "ensemble_eval",
    "pseudo-label": "pseudo_label",
    "distill": "distill",
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="path to the experiment config (JSON)")
    parser.add_argument("--run-id", default=None, help="override the config's run id")
    parser.add_argument("--seed", type=int, default=None, help="override the config's seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distillseg",
        description="Train, ensemble, pseudo-label, and distill 3D segmentation models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("gen-data", "generate phantom cases (or validate the real data directory)"),
        ("split", "build the train/validation/test/unlabeled-pool split"),
        ("train", "train the three stand-alone networks"),
        ("evaluate", "evaluate the stand-alone networks on the test set"),
        ("ensemble", "evaluate the fused ensemble on the test set"),
        ("pseudo-label", "annotate the unlabeled pool with the ensemble"),
        ("distill", "train the student on real plus pseudo-labeled data"),
        ("report", "render the manifest as a table, CSV, and plots"),
        ("run", "execute the full pipeline end to end"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, run_id=args.run_id, seed=args.seed)
        pipeline = Pipeline(config)
        if args.command == "run":
            result = pipeline.run()
            print(emit_table(result.manifest))
            print(f"manifest: {result.manifest_path}")
        elif args.command == "report":
            manifest_path = pipeline.manifest_path
            if not manifest_path.exists():
                print(f"no manifest at {manifest_path}; run the pipeline first", file=sys.stderr)
                return 1
            manifest = json.loads(manifest_path.read_text())
            table = emit_table(manifest)
            (pipeline.run_dir / "table.txt").write_text(table)
            (pipeline.run_dir / "table.csv").write_text(emit_csv(manifest))
            plots = emit_plots(manifest, pipeline.run_dir / "plots")
            print(table)
            print(f"wrote {len(plots)} plot file(s) under {pipeline.run_dir / 'plots'}")
        else:
            result = pipeline.run(until=_SUBCOMMAND_TARGET[args.command])
            done = ", ".join(result.executed) if result.executed else "nothing (all cached)"
            print(f"executed: {done}")
            print(f"manifest: {result.manifest_path}")
    except DistillsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
