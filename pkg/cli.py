"""Command-line entry point for speaker-inventory continuous separation."""
import argparse
import asyncio
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import List, Optional

import pytz

import config
from handlers import analysis, experiments, simulate

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_DATEFMT = '%Y-%m-%d %H:%M:%S'


class ZonedFormatter(logging.Formatter):
    """Logging Formatter that renders timestamps in a configured timezone."""

    def __init__(self, fmt=None, datefmt=None, timezone: str = config.LOG_TIMEZONE):
        super().__init__(fmt, datefmt)
        self.tz = pytz.timezone(timezone)

    def formatTime(self, record, datefmt=None):
        dt = datetime.fromtimestamp(record.created, self.tz)
        if datefmt:
            return dt.strftime(datefmt)
        return dt.strftime(LOG_DATEFMT)


def setup_logging(verbose: bool = False, timezone: str = config.LOG_TIMEZONE) -> None:
    handler = logging.StreamHandler()
    handler.setFormatter(ZonedFormatter(fmt=LOG_FORMAT, datefmt=LOG_DATEFMT, timezone=timezone))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        handlers=[handler],
        force=True,
    )

    # librosa pulls in numba, which logs every compilation at DEBUG
    for name in ('numba', 'librosa', 'matplotlib'):
        logging.getLogger(name).setLevel(logging.WARNING)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='cssi',
        description='Continuous speech separation with a self-informed speaker inventory',
    )
    parser.add_argument('--config', type=Path, help='KEY = value experiment config file')
    parser.add_argument('--verbose', action='store_true', help='debug logging')
    parser.add_argument('--log-timezone', default=None, help=f'timezone of log timestamps (default {config.LOG_TIMEZONE})')
    subparsers = parser.add_subparsers(dest='command', metavar='command')
    subparsers.required = True

    simulate.register(subparsers)
    analysis.register(subparsers)
    experiments.register(subparsers)
    return parser


async def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, set up logging and run the chosen subcommand."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1

    try:
        setup_logging(args.verbose, args.log_timezone or config.LOG_TIMEZONE)
    except pytz.UnknownTimeZoneError:
        setup_logging(args.verbose)
        logger.error(f"Unknown timezone: {args.log_timezone}")
        return 1

    logger.debug(f"Running {args.command}")
    try:
        return await args.handler(args)
    except Exception as e:
        logger.error(f"Unexpected error in {args.command}: {e}", exc_info=True)
        return 1


if __name__ == '__main__':
    try:
        sys.exit(asyncio.run(main()))
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        sys.exit(1)
