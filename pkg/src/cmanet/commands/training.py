import argparse
import logging

from cmanet.ablation import ablate
from cmanet.commands import add_command, echo_config
from cmanet.dataio import read_dataset
from cmanet.errors import ConfigError
from cmanet.models import DataMode, Variant
from cmanet.setup import load_config, progress_enabled
from cmanet.train import fit

logger = logging.getLogger(__name__)


def _overrides(args: argparse.Namespace) -> dict:
    return {
        "seed": args.seed,
        "train.seed": args.seed,
        "train.epochs": args.epochs,
        "train.batch_size": args.batch_size,
        "train.learning_rate": args.lr,
        "train.val_every": args.val_every,
        "train.workers": args.workers,
        "model.variant": args.model_variant,
    }


def train(args: argparse.Namespace) -> None:
    overrides = _overrides(args)
    overrides["train.data_mode"] = DataMode.FRESH.value if args.fresh else DataMode.FIXED.value
    config = load_config(args.config, overrides)
    echo_config(config)

    train_data = read_dataset(args.data) if args.data else None
    val_data = read_dataset(args.val_data) if args.val_data else None
    result = fit(
        config,
        args.out,
        train_data=train_data,
        val_data=val_data,
        resume=args.resume,
        progress=progress_enabled(args.no_progress),
    )
    logger.info(f"Training finished, last checkpoint: {result.last_checkpoint}")


def run_ablation(args: argparse.Namespace) -> None:
    config = load_config(args.config, _overrides(args))
    echo_config(config)
    if config.train.data_mode is DataMode.FIXED and not args.data:
        raise ConfigError("fixed-dataset ablation needs --data")

    summary = ablate(
        config,
        read_dataset(args.test_data),
        args.out,
        train_data=read_dataset(args.data) if args.data else None,
        val_data=read_dataset(args.val_data) if args.val_data else None,
        workers=config.train.workers,
        progress=progress_enabled(args.no_progress),
    )
    winner = "cma" if summary.cma_better else "plain"
    logger.info(f"Lower median error: {winner} ({summary.median_delta_m:+.3f} m plain minus cma)")


def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="Configuration file or name")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--val-data", default=None, help="Separate validation dataset")
    parser.add_argument(
        "--model-variant",
        choices=[v.value for v in Variant],
        default=None,
        help="Attention variant (default from the configuration)",
    )
    parser.add_argument("--epochs", type=int, default=None, help="Override train.epochs")
    parser.add_argument("--batch-size", type=int, default=None, help="Override train.batch_size")
    parser.add_argument("--lr", type=float, default=None, help="Override train.learning_rate")
    parser.add_argument("--val-every", type=int, default=None, help="Override train.val_every")
    parser.add_argument("--seed", type=int, default=None, help="Override the configured seeds")
    parser.add_argument("--workers", type=int, default=None, help="Concurrent simulation threads")


def register(subparsers, common: argparse.ArgumentParser) -> None:
    parser = add_command(subparsers, common, "train", "Train a model and write checkpoints")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--data", default=None, help="Training dataset (fixed-dataset mode)")
    source.add_argument(
        "--fresh", action="store_true", help="Simulate new topologies every epoch"
    )
    _add_training_flags(parser)
    parser.add_argument("--resume", default=None, help="Continue from this checkpoint")
    parser.set_defaults(handler=train)

    parser = add_command(
        subparsers, common, "ablate", "Train and compare the masked and unmasked variants"
    )
    parser.add_argument("--data", default=None, help="Training dataset (fixed-dataset mode)")
    parser.add_argument("--test-data", required=True, help="Test dataset")
    _add_training_flags(parser)
    parser.set_defaults(handler=run_ablation)
