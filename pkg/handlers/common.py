"""Helpers shared by the subcommand handlers."""
import argparse
import asyncio
import logging
import re
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple, TypeVar

from audio import Waveform, read_wav
from config import ExperimentConfig, load_experiment_config

logger = logging.getLogger(__name__)

T = TypeVar('T')
R = TypeVar('R')

_ENROLLMENT_FILE = re.compile(r'^spk(\d+)\.wav$')


def add_seed_and_output(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--seed', dest='seed', type=int, help='top-level seed')
    parser.add_argument('--output', dest='output_dir', type=Path, help='output directory')


def add_recipe_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--speakers', dest='n_speakers', type=int, help='speakers per recording')
    parser.add_argument('--duration', dest='duration_s', type=float, help='recording length in seconds')
    parser.add_argument('--overlap', dest='target_overlap', type=float, help='target overlap ratio')
    parser.add_argument('--corpus', dest='corpus', help="'synthetic' or a spk<id>/*.wav directory")
    parser.add_argument('--irrelevant', dest='n_irrelevant', type=int,
                        help='extra enrollment speakers absent from the recordings')


def add_css_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--clusters', dest='n_clusters', type=int, help='number of inventory clusters M')
    parser.add_argument('--backend', dest='backend', choices=['oracle', 'affinity'])
    parser.add_argument('--inventory-mode', dest='inventory_mode', choices=['self', 'enrolled'])
    parser.add_argument('--enrollments', dest='enrollment_dir', type=Path,
                        help='directory of spk<id>.wav enrollment files')
    parser.add_argument('--profile-condition', dest='profile_condition',
                        choices=['selected', 'two_correct', 'one_correct', 'two_wrong'])
    parser.add_argument('--stitch-method', dest='stitch_method', choices=['xcorr', 'spectral'])
    parser.add_argument('--strict-average', dest='strict_average', action='store_true', default=None,
                        help='average selection scores over silent frames too')
    parser.add_argument('--window', dest='window_s', type=float, help='segment window in seconds')
    parser.add_argument('--hop', dest='hop_s', type=float, help='segment hop in seconds')


def experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then the --config file, then flags."""
    overrides = {name: getattr(args, name) for name in ExperimentConfig.model_fields if hasattr(args, name)}
    return load_experiment_config(getattr(args, 'config', None), overrides)


def load_enrollment_dir(directory: Path) -> Tuple[List[int], List[Waveform]]:
    """Enrollment WAVs named spk<id>.wav, ordered by speaker id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ValueError(f"Enrollment directory not found: {directory}")
    found: Dict[int, Path] = {}
    for path in directory.iterdir():
        match = _ENROLLMENT_FILE.match(path.name)
        if match:
            found[int(match.group(1))] = path
    if not found:
        raise ValueError(f"No spk<id>.wav enrollment files in {directory}")
    ids = sorted(found)
    return ids, [read_wav(found[i]) for i in ids]


async def run_limited(items: Sequence[T], fn: Callable[[T], R], workers: int) -> List[R]:
    """Run a blocking function over items in threads, at most `workers` at a time, keeping order."""
    semaphore = asyncio.Semaphore(max(1, workers))

    async def run_one(item: T) -> R:
        async with semaphore:
            return await asyncio.to_thread(fn, item)

    return list(await asyncio.gather(*(run_one(item) for item in items)))


def describe_error(e: Exception) -> str:
    return f"{type(e).__name__}: {e}"
