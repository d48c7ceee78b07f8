import argparse
import json
import logging

from cmanet.channel import Scene, build_dataset
from cmanet.commands import add_command, echo_config
from cmanet.dataio import describe_file
from cmanet.setup import load_config, progress_enabled

logger = logging.getLogger(__name__)


def gen_data(args: argparse.Namespace) -> None:
    config = load_config(args.config, {"seed": args.seed, "train.workers": args.workers})
    echo_config(config)
    scene = Scene.from_config(config)
    header = build_dataset(
        scene,
        args.count,
        config.seed,
        args.out,
        workers=config.train.workers,
        progress=progress_enabled(args.no_progress),
    )
    logger.info(f"Wrote {header.count} samples of shape {header.shape} to {args.out}")


def info(args: argparse.Namespace) -> None:
    print(json.dumps(describe_file(args.file), indent=2))


def register(subparsers, common: argparse.ArgumentParser) -> None:
    parser = add_command(subparsers, common, "gen-data", "Simulate topologies into a dataset file")
    parser.add_argument("--config", default=None, help="Configuration file or name")
    parser.add_argument("--count", type=int, required=True, help="Number of topologies")
    parser.add_argument("--seed", type=int, default=None, help="Override the configured seed")
    parser.add_argument("--out", required=True, help="Dataset file to write")
    parser.add_argument(
        "--workers", type=int, default=None, help="Concurrent simulation threads"
    )
    parser.set_defaults(handler=gen_data)

    parser = add_command(subparsers, common, "info", "Print the header of a dataset or checkpoint")
    parser.add_argument("file", help="Dataset or checkpoint file")
    parser.set_defaults(handler=info)
