import argparse
import logging

from cmanet.commands import add_command, echo_config
from cmanet.dataio import read_dataset
from cmanet.evaluate import (
    accumulation_curve,
    checkpoint_id,
    evaluate_model,
    hotspot_grid,
    untrained_median,
    write_curve,
    write_report,
)
from cmanet.setup import load_config, progress_enabled
from cmanet.train import load_model

logger = logging.getLogger(__name__)


def _load(args: argparse.Namespace):
    model, manifest = load_model(args.checkpoint)
    echo_config(manifest, exclude={"parameters", "rng_state"})
    return model, manifest, read_dataset(args.data)


def evaluate(args: argparse.Namespace) -> None:
    model, manifest, dataset = _load(args)
    report = evaluate_model(
        model,
        dataset,
        checkpoint=checkpoint_id(args.checkpoint),
        manifest=manifest,
        workers=args.workers,
        progress=progress_enabled(args.no_progress),
    )
    if args.untrained_baseline:
        median = untrained_median(manifest, dataset, args.workers)
        report = report.model_copy(update={"untrained_median_m": median})
        logger.info(f"Untrained median error: {median:.3f} m")
    write_report(report, args.out)
    logger.info(f"Report written to {args.out}")


def curve(args: argparse.Namespace) -> None:
    stride = load_config(args.config, {"eval.stride": getattr(args, "stride", None)}).eval.stride
    model, _, dataset = _load(args)
    result = accumulation_curve(model, dataset, stride=stride, workers=args.workers)
    write_curve(result, args.out)
    logger.info(f"Curve written to {args.out}")


def hotspot(args: argparse.Namespace) -> None:
    grid_flag, size_flag = getattr(args, "grid", None), getattr(args, "cell_size", None)
    settings = load_config(args.config, {"eval.grid": grid_flag, "eval.cell_size": size_flag}).eval
    if grid_flag is not None:
        cells, cell_size = settings.grid, None
    else:
        cells, cell_size = settings.grid, settings.cell_size
    model, _, dataset = _load(args)
    grid = hotspot_grid(model, dataset, cells=cells, cell_size=cell_size, workers=args.workers)
    counts_path = grid.write(args.out)
    logger.info(f"Grid written to {args.out}, counts to {counts_path}")


def _add_inputs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", required=True, help="Checkpoint file")
    parser.add_argument("--data", required=True, help="Test dataset")
    parser.add_argument("--workers", type=int, default=1, help="Concurrent prediction threads")


def _add_config(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config", default=None, help="Configuration whose [eval] table supplies the defaults"
    )


def register(subparsers, common: argparse.ArgumentParser) -> None:
    parser = add_command(subparsers, common, "eval", "Error statistics of a checkpoint on a dataset")
    _add_inputs(parser)
    parser.add_argument("--out", required=True, help="JSON report to write")
    parser.add_argument(
        "--untrained-baseline",
        action="store_true",
        help="Also report the median error of the same model before training",
    )
    parser.set_defaults(handler=evaluate)

    parser = add_command(
        subparsers, common, "curve", "Mean error after every STRIDE accumulated subcarriers"
    )
    _add_inputs(parser)
    parser.add_argument("--out", required=True, help="CSV file to write")
    _add_config(parser)
    parser.add_argument(
        "--stride",
        type=int,
        default=argparse.SUPPRESS,
        help="Subcarriers between points (overrides eval.stride, 12 unless configured)",
    )
    parser.set_defaults(handler=curve)

    parser = add_command(subparsers, common, "hotspot", "Mean error per horizontal grid cell")
    _add_inputs(parser)
    parser.add_argument("--out", required=True, help="CSV matrix to write")
    _add_config(parser)
    cells = parser.add_mutually_exclusive_group()
    cells.add_argument(
        "--grid",
        type=int,
        default=argparse.SUPPRESS,
        help="Cells along each horizontal axis (overrides eval.grid, 20 unless configured)",
    )
    cells.add_argument(
        "--cell-size",
        type=float,
        default=argparse.SUPPRESS,
        help="Square cell side in meters (overrides eval.cell_size)",
    )
    parser.set_defaults(handler=hotspot)
