"""Subcommands of the ``cmanet`` command line."""

import argparse

from pydantic import BaseModel


def add_command(
    subparsers, common: argparse.ArgumentParser, name: str, help: str
) -> argparse.ArgumentParser:
    return subparsers.add_parser(
        name,
        help=help,
        description=help,
        parents=[common],
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )


def echo_config(config: BaseModel, exclude: set[str] | None = None) -> None:
    """Print the resolved configuration before the command runs."""
    print(config.model_dump_json(indent=2, exclude=exclude), flush=True)
