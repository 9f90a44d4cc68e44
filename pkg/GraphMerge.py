"""
graphmerge command line

    python GraphMerge.py pipeline --config graphmerge.toml --out runs/demo
    python GraphMerge.py study --kind mask --out runs/demo
"""

import argparse
import logging
import sys
from typing import List, Optional

from artifact_helpers import RunPaths
from commands import evaluate, gen_data, invert, merge, pipeline, pretrain, studies
from errors import GraphMergeError
from merge_config import get_thread_count, load_config

logger = logging.getLogger("graphmerge")

# subcommand -> (help, runner)
COMMANDS = {
    "gen-data": ("build source/target domains", lambda cfg, paths, args: gen_data.run(cfg, paths)),
    "pretrain": ("train one expert per roster entry", lambda cfg, paths, args: pretrain.run(cfg, paths, args.workers)),
    "invert": ("generate synthetic graphs from every expert", lambda cfg, paths, args: invert.run(cfg, paths, args.workers)),
    "merge": ("train masks and gate on the synthetic mixture", lambda cfg, paths, args: merge.run(cfg, paths)),
    "eval": ("score experts, baselines and the merged model", lambda cfg, paths, args: evaluate.run(cfg, paths, args.workers)),
    "pipeline": ("run every stage in order", lambda cfg, paths, args: pipeline.run(cfg, paths, args.workers)),
    "study": ("mask placement, ablation or parameter drift study",
              lambda cfg, paths, args: studies.run(cfg, paths, args.kind, args.expert, args.epochs)),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphmerge",
                                     description="Source-free merging of graph classifiers")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--quiet", action="store_true", help="only warnings and errors")
    common.add_argument("--verbose", action="store_true", help="per-epoch debug lines")

    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, _) in COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text, parents=[common])
        if name == "study":
            cmd.add_argument("--kind", choices=studies.STUDY_KINDS, required=True)
            cmd.add_argument("--expert", help="expert id for the drift study")
            cmd.add_argument("--epochs", type=int, help="fine-tuning epochs per domain for the drift study")
    return parser


def configure_logging(quiet: bool, verbose: bool) -> None:
    level = logging.WARNING if quiet else logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.quiet, args.verbose)
    try:
        config = load_config(args.config).with_overrides(args.seed, args.out)
        args.workers = get_thread_count()
        paths = RunPaths.create(config.output.directory)
        _, runner = COMMANDS[args.command]
        runner(config, paths, args)
    except GraphMergeError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
