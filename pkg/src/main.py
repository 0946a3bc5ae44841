"""
Harris Flow Toolkit - Command-Line Entry Point

Usage:
    python -m src.main run <spec> [--seed N] [--replicas N] [--out DIR] [--threads N]
    python -m src.main validate <spec>
"""

from pathlib import Path
from typing import List, Optional
import argparse
import logging
import sys

from src.cli.commands import run_command, validate_command
from src.core.config import settings

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.log_level.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def _u64(value: str) -> int:
    seed = int(value)
    if not 0 <= seed < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {value}")
    return seed


def _positive(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return number


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="harris",
        description="Simulate Harris flows and verify their short-time laws",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run an experiment spec and write its report")
    validate = commands.add_parser("validate", help="Check a spec and print the resolved configuration")
    for sub in (run, validate):
        sub.add_argument("spec", type=Path, help="Experiment spec file (TOML)")
        sub.add_argument("--seed", type=_u64, default=None, help="Override the spec seed")
        sub.add_argument("--replicas", type=_positive, default=None, help="Override the replica count")
        sub.add_argument("--out", type=Path, default=None, help="Output directory")
    run.add_argument(
        "--threads",
        type=_positive,
        default=None,
        help="Worker threads for replicas (default: HARRIS_THREADS or 1)",
    )
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate":
        return validate_command(args.spec, seed=args.seed, replicas=args.replicas, output_dir=args.out)
    return run_command(
        args.spec,
        seed=args.seed,
        replicas=args.replicas,
        output_dir=args.out,
        threads=args.threads,
    )


if __name__ == "__main__":
    sys.exit(main())
