"""simulate: write a dataset of simulated recordings plus enrollments."""
import argparse
import logging
from pathlib import Path
from typing import Any, Dict

from audio import write_wav
from config import ExperimentConfig, derive_seed
from metrics import overlap_ratio
from reports import write_json
from simulator import (enrollment_speakers, generate_enrollments, generate_recording, make_corpus,
                       save_recording)

from .common import add_recipe_flags, add_seed_and_output, describe_error, experiment_config, run_limited

logger = logging.getLogger(__name__)


def recording_name(index: int) -> str:
    return f'rec_{index:03d}'


def simulate_one(cfg: ExperimentConfig, index: int, directory: Path) -> Dict[str, Any]:
    """Simulate and save recording `index` of a dataset."""
    seed = derive_seed(cfg.seed, f'recording-{index}')
    recording = generate_recording(
        cfg.n_speakers, cfg.duration_s, cfg.target_overlap, seed,
        corpus=make_corpus(cfg.corpus),
        snr_db_range=cfg.snr_db_range,
        rt60_range=cfg.rt60_range,
    )
    meta = {'config': cfg.echo(), 'index': index, 'seed': seed}
    save_recording(recording, directory, meta)
    return {
        'name': directory.name,
        'seed': seed,
        'duration_s': recording.duration,
        'speaker_ids': list(recording.speaker_ids),
        'utterances': len(recording.script.events),
        'overlap_ratio': round(overlap_ratio(recording.script), 6),
        'rt60_s': recording.rt60,
        'snr_db': recording.snr_db,
    }


def write_enrollments(cfg: ExperimentConfig, directory: Path) -> list:
    """Enrollment utterances for the dataset speakers plus the irrelevant ones."""
    ids = enrollment_speakers(range(cfg.n_speakers), cfg.n_irrelevant)
    enrollments = generate_enrollments(ids, derive_seed(cfg.seed, 'enrollment'), corpus=make_corpus(cfg.corpus))
    for speaker, waveform in enrollments.items():
        write_wav(directory / f'spk{speaker}.wav', waveform)
    return ids


async def cmd_simulate(args: argparse.Namespace) -> int:
    """Simulate `count` recordings and a manifest."""
    try:
        cfg = experiment_config(args)
    except ValueError as e:
        logger.error(f"Invalid configuration: {e}")
        return 1

    output = Path(cfg.output_dir)
    try:
        output.mkdir(parents=True, exist_ok=True)
        directories = [output / recording_name(i) for i in range(cfg.count)]
        summaries = await run_limited(
            list(enumerate(directories)),
            lambda item: simulate_one(cfg, item[0], item[1]),
            cfg.workers,
        )
        enrolled = write_enrollments(cfg, output / 'enrollments')
        write_json(output / 'manifest.json', {
            'config': cfg.echo(),
            'seed': cfg.seed,
            'recordings': summaries,
            'enrollment_speakers': enrolled,
        })
    except (ValueError, OSError) as e:
        logger.error(f"Simulation failed: {describe_error(e)}")
        return 1

    logger.info(f"Wrote {cfg.count} recordings and {len(enrolled)} enrollments to {output}")
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser('simulate', help='simulate multi-talker recordings')
    add_seed_and_output(parser)
    add_recipe_flags(parser)
    parser.add_argument('--count', dest='count', type=int, help='number of recordings')
    parser.add_argument('--workers', dest='workers', type=int, help='parallel recordings')
    parser.set_defaults(handler=cmd_simulate)
