import argparse
import logging
import sys
from collections.abc import Sequence

from cmanet.commands import data, diagnostics, evaluation, training
from cmanet.errors import CmanetError
from cmanet.setup import setup_logging

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_MISSING_FILE = 9
EXIT_INTERRUPTED = 130


def common_arguments() -> argparse.ArgumentParser:
    """Flags every subcommand accepts, after the subcommand name."""
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        default="INFO",
        help="Set the logging level",
    )
    parser.add_argument("--log-file", default=None, help="Also write the log to this file")
    parser.add_argument(
        "--no-progress", action="store_true", help="Disable progress bars"
    )
    return parser


def parse_arguments(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="cmanet",
        description="Multi-base-station CSI positioning: simulate channels, train CMANet, evaluate",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s gen-data --config desk --count 8000 --seed 1 --out train.bin --workers 4
  %(prog)s train --data train.bin --config desk --out runs/desk
  %(prog)s eval --checkpoint runs/desk/last.cmck --data test.bin --out report.json
  %(prog)s curve --checkpoint runs/desk/last.cmck --data test.bin --out curve.csv
  %(prog)s gradcheck --tiny
        """,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    common = common_arguments()
    for module in (data, training, evaluation, diagnostics):
        module.register(subparsers, common)
    return parser.parse_args(argv)


def run(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv``, run the chosen command and return the process exit code.

    Usage errors return argparse's status 2, ``--help`` returns 0.
    """
    try:
        args = parse_arguments(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else EXIT_USAGE
    setup_logging(args.log_level, args.log_file)
    logger.debug(f"Arguments: {vars(args)}")

    try:
        args.handler(args)
    except CmanetError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except FileNotFoundError as e:
        logger.error(f"File not found: {e.filename or e}")
        return EXIT_MISSING_FILE
    except KeyboardInterrupt:
        logger.info("Cancelled by user")
        return EXIT_INTERRUPTED
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
