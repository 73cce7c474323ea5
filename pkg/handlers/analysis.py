"""embed and inventory: standalone embedding and inventory building."""
import argparse
import asyncio
import logging
from pathlib import Path
from typing import Optional

from audio import read_wav
from config import ExperimentConfig, derive_seed
from embedder import chunk_embeddings, load_chunk_embeddings, save_chunk_embeddings
from inventory import (SpeakerInventory, build_inventory_from_chunks, build_inventory_from_enrollments,
                       build_inventory_self, purity, save_inventory)
from reports import write_json
from simulator import load_recording

from .common import add_seed_and_output, describe_error, experiment_config, load_enrollment_dir

logger = logging.getLogger(__name__)


def _embed(cfg: ExperimentConfig, source: Path, target: Path) -> int:
    chunks = chunk_embeddings(read_wav(source))
    save_chunk_embeddings(target, chunks, {'config': cfg.echo(), 'seed': cfg.seed, 'source': source.name})
    return len(chunks)


async def cmd_embed(args: argparse.Namespace) -> int:
    """Chunk embeddings of a WAV file, written as EMB1 plus sidecar."""
    try:
        cfg = experiment_config(args)
        count = await asyncio.to_thread(_embed, cfg, Path(args.input), Path(args.embeddings))
    except (ValueError, OSError) as e:
        logger.error(f"Embedding failed: {describe_error(e)}")
        return 1
    logger.info(f"Wrote {count} chunk embeddings to {args.embeddings}")
    return 0


def _build(cfg: ExperimentConfig, source: Optional[Path], recording_dir: Optional[Path]) -> SpeakerInventory:
    if cfg.inventory_mode == 'enrolled':
        if cfg.enrollment_dir is None:
            raise ValueError("enrolled inventory mode needs an enrollment directory (--enrollments)")
        ids, waveforms = load_enrollment_dir(cfg.enrollment_dir)
        return build_inventory_from_enrollments(waveforms, ids)
    seed = derive_seed(cfg.seed, 'kmeans')
    if source is not None and source.suffix == '.emb':
        return build_inventory_from_chunks(load_chunk_embeddings(source), cfg.n_clusters, seed)
    if source is not None:
        mixture = read_wav(source)
    elif recording_dir is not None:
        mixture = load_recording(recording_dir).mixture
    else:
        raise ValueError("self inventory mode needs --input or --recording")
    return build_inventory_self(mixture, cfg.n_clusters, seed)


async def cmd_inventory(args: argparse.Namespace) -> int:
    """Build a self-informed or enrolled inventory, optionally with a purity report."""
    try:
        cfg = experiment_config(args)
        inventory = await asyncio.to_thread(_build, cfg, args.input, args.recording)
        save_inventory(args.inventory, inventory)
        if args.purity is not None:
            if args.recording is None:
                raise ValueError("a purity report needs --recording")
            recording = await asyncio.to_thread(load_recording, args.recording)
            report = purity(inventory, recording)
            write_json(args.purity, {'config': cfg.echo(), 'seed': cfg.seed, **report.to_json()})
    except (ValueError, OSError) as e:
        logger.error(f"Inventory failed: {describe_error(e)}")
        return 1
    logger.info(f"Wrote inventory of {inventory.size} profiles to {args.inventory}")
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    embed = subparsers.add_parser('embed', help='chunk embeddings of a WAV file')
    add_seed_and_output(embed)
    embed.add_argument('--input', type=Path, required=True, help='16 kHz mono WAV')
    embed.add_argument('--embeddings', type=Path, required=True, help='EMB1 output file')
    embed.set_defaults(handler=cmd_embed)

    inventory = subparsers.add_parser('inventory', help='build a speaker inventory')
    add_seed_and_output(inventory)
    inventory.add_argument('--input', type=Path, help='mixture WAV or EMB1 chunk embeddings for a self-informed inventory')
    inventory.add_argument('--recording', type=Path, help='simulated recording directory')
    inventory.add_argument('--clusters', dest='n_clusters', type=int, help='number of clusters M')
    inventory.add_argument('--inventory-mode', dest='inventory_mode', choices=['self', 'enrolled'])
    inventory.add_argument('--enrollments', dest='enrollment_dir', type=Path,
                           help='directory of spk<id>.wav enrollment files')
    inventory.add_argument('--inventory', type=Path, required=True, help='EMB1 output file')
    inventory.add_argument('--purity', type=Path, help='write a cluster purity report (JSON) here')
    inventory.set_defaults(handler=cmd_inventory)
