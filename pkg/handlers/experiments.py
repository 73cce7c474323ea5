"""pipeline, sweep-clusters and eval: end-to-end runs, scored and stored."""
import argparse
import asyncio
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import config
from audio import Waveform, read_wav, write_wav
from config import ExperimentConfig
from database import ResultsDatabase
from embedder import write_embeddings
from inventory import (PurityReport, SpeakerInventory, build_inventory_from_enrollments, purity,
                       speaker_references)
from metrics import EvalReport, eval_segments, eval_utterances, unprocessed_segments, unprocessed_streams
from pipeline import (CssConfig, CssResult, SegmentProcessingError, plan_segments, run_css,
                      selected_speakers, selection_agreement)
from reports import bucket_counts, bucket_table, purity_table, sweep_spread, sweep_table, utterance_table
from reports import write_json, write_text
from separator import write_mask
from simulator import SimulatedRecording, load_recording

from .common import (add_css_flags, add_recipe_flags, add_seed_and_output, describe_error,
                     experiment_config, load_enrollment_dir, run_limited)
from .simulate import recording_name, simulate_one

logger = logging.getLogger(__name__)

UNPROCESSED = 'Unprocessed'
RUN_ERRORS = (ValueError, OSError, SegmentProcessingError)


@dataclass
class ExperimentOutcome:
    """Scores of one pipeline run next to the unprocessed baseline."""

    recording: str
    system: str
    css: CssResult
    utterances: Dict[str, EvalReport] = field(default_factory=dict)
    segments: Dict[str, EvalReport] = field(default_factory=dict)
    purity: PurityReport = field(default_factory=PurityReport)

    @property
    def mean_utterance(self) -> Optional[float]:
        return self.utterances[self.system].mean

    @property
    def mean_segment(self) -> Optional[float]:
        return self.segments[self.system].mean


def system_name(cfg: ExperimentConfig) -> str:
    if cfg.inventory_mode == 'enrolled':
        return f'{cfg.backend} (enrolled, {cfg.profile_condition})'
    return f'{cfg.backend} (M={cfg.n_clusters})'


def enrolled_inventory(cfg: ExperimentConfig) -> Optional[SpeakerInventory]:
    """Inventory from the enrollment directory, or None in self mode."""
    if cfg.inventory_mode != 'enrolled':
        return None
    if cfg.enrollment_dir is None:
        raise ValueError("enrolled inventory mode needs an enrollment directory (--enrollments)")
    ids, waveforms = load_enrollment_dir(cfg.enrollment_dir)
    return build_inventory_from_enrollments(waveforms, ids)


def evaluate(recording: SimulatedRecording, system: str, streams: Sequence[Waveform],
             segments: Sequence[Tuple[float, float, Sequence[Waveform]]]) -> Tuple[Dict[str, EvalReport],
                                                                                    Dict[str, EvalReport]]:
    """Utterance and segment reports for a system and the unprocessed mixture."""
    bounds = [(start, end) for start, end, _ in segments]
    utterances = {
        UNPROCESSED: eval_utterances(unprocessed_streams(recording), recording),
        system: eval_utterances(streams, recording),
    }
    segment_reports = {
        UNPROCESSED: eval_segments(unprocessed_segments(recording, bounds), recording),
        system: eval_segments(segments, recording),
    }
    return utterances, segment_reports


def run_experiment(cfg: ExperimentConfig, recording: SimulatedRecording, name: str,
                   inventory: Optional[SpeakerInventory] = None) -> ExperimentOutcome:
    """Separate one recording and score it."""
    system = system_name(cfg)
    css = run_css(recording.mixture, CssConfig.from_experiment(cfg), inventory, truth=recording)
    utterances, segments = evaluate(recording, system, css.streams, css.segment_outputs)
    outcome = ExperimentOutcome(name, system, css, utterances, segments)
    if css.inventory is not None:
        outcome.purity = purity(css.inventory, recording)
    return outcome


def report_text(outcome: ExperimentOutcome) -> str:
    parts = [
        f'Recording {outcome.recording}',
        '',
        'Segment-wise SI-SDR (dB) by overlap ratio (%)',
        bucket_table(outcome.segments),
        bucket_counts(outcome.segments[outcome.system]),
        'Utterance-wise scores',
        utterance_table(outcome.utterances),
        'Cluster purity over single-speaker chunks',
        purity_table(outcome.purity.clusters),
    ]
    return '\n'.join(parts)


def report_json(cfg: ExperimentConfig, outcome: ExperimentOutcome) -> Dict[str, Any]:
    return {
        'config': cfg.echo(),
        'seed': cfg.seed,
        'recording': outcome.recording,
        'system': outcome.system,
        'utterance': {system: report.to_json() for system, report in outcome.utterances.items()},
        'segment': {system: report.to_json() for system, report in outcome.segments.items()},
        'purity': outcome.purity.to_json(),
    }


def write_artifacts(cfg: ExperimentConfig, outcome: ExperimentOutcome, directory: Path) -> None:
    """Streams, separation log, inventory and reports of one run."""
    css = outcome.css
    directory.mkdir(parents=True, exist_ok=True)
    for channel, stream in enumerate(css.streams):
        write_wav(directory / f'stream_{channel}.wav', stream)
    write_json(directory / 'css_log.json', {
        'config': cfg.echo(),
        'seed': cfg.seed,
        'recording': outcome.recording,
        'plan': {'window_s': css.plan.window, 'hop_s': css.plan.hop,
                 'segments': [list(bounds) for bounds in css.plan.segments]},
        'segments': css.log,
    })
    if css.inventory is not None:
        write_embeddings(directory / 'inventory.emb', css.inventory.profiles, {
            'config': cfg.echo(),
            'provenance': css.inventory.provenance.to_json(),
        })
    write_json(directory / 'report.json', report_json(cfg, outcome))
    write_text(directory / 'report.txt', report_text(outcome))


def write_masks(css: CssResult, directory: Path) -> int:
    """MSK1 files per separated segment, named by segment index and output stream."""
    written = 0
    for index, masks in enumerate(css.masks):
        for channel, mask in enumerate(masks):
            write_mask(directory / f'segment_{index:03d}_{channel}.msk', mask)
            written += 1
    return written


async def store_outcome(db: ResultsDatabase, label: str, cfg: ExperimentConfig,
                        outcome: ExperimentOutcome) -> Optional[int]:
    run_id = await db.add_run(label, outcome.recording, cfg.n_clusters, cfg.backend, cfg.seed, cfg.echo(),
                              created_at=config.run_stamp())
    if run_id is None:
        return None
    system = outcome.system
    await db.add_utterance_scores(run_id, outcome.utterances[system].metric, outcome.utterances[system].items)
    await db.add_segment_scores(run_id, outcome.segments[system].metric, outcome.segments[system].items)
    await db.add_cluster_purity(run_id, outcome.purity.clusters)
    await db.finish_run(run_id, outcome.mean_utterance, outcome.mean_segment)
    return run_id


async def open_database(directory: Path, cfg: ExperimentConfig) -> ResultsDatabase:
    db = ResultsDatabase(str(directory / config.RESULTS_DB_NAME), cfg.log_timezone)
    await db.init_db()
    return db


async def obtain_recording(cfg: ExperimentConfig, recording_dir: Optional[Path],
                           output: Path) -> Tuple[SimulatedRecording, str]:
    """Load the given recording, or simulate one into the output directory first."""
    if recording_dir is None:
        recording_dir = output / 'recording'
        await asyncio.to_thread(simulate_one, cfg, 0, recording_dir)
    recording = await asyncio.to_thread(load_recording, recording_dir)
    return recording, Path(recording_dir).name


async def cmd_pipeline(args: argparse.Namespace) -> int:
    """Run the separation pipeline on one recording and report its scores."""
    try:
        cfg = experiment_config(args)
    except ValueError as e:
        logger.error(f"Invalid configuration: {e}")
        return 1

    output = Path(cfg.output_dir)
    try:
        output.mkdir(parents=True, exist_ok=True)
        recording, name = await obtain_recording(cfg, args.recording, output)
        inventory = await asyncio.to_thread(enrolled_inventory, cfg)
        outcome = await asyncio.to_thread(run_experiment, cfg, recording, name, inventory)
        await asyncio.to_thread(write_artifacts, cfg, outcome, output)
        if args.dump_masks:
            written = await asyncio.to_thread(write_masks, outcome.css, output / 'masks')
            logger.info(f"Wrote {written} masks to {output / 'masks'}")
    except RUN_ERRORS as e:
        logger.error(f"Pipeline failed: {describe_error(e)}")
        return 1

    db = await open_database(output, cfg)
    run_id = await store_outcome(db, 'pipeline', cfg, outcome)
    if run_id is None:
        logger.warning("Scores were not stored in the results database")
    mean = outcome.mean_utterance
    logger.info(f"Pipeline finished: mean utterance SI-SDR {mean:.2f} dB" if mean is not None
                else "Pipeline finished: no scored utterances")
    return 0


def parse_cluster_list(text: str) -> List[int]:
    try:
        values = sorted({int(part) for part in text.split(',') if part.strip()})
    except ValueError:
        raise ValueError(f"Cluster list must be comma-separated integers, got {text!r}")
    if not values:
        raise ValueError("Cluster list is empty")
    if values[0] < 2:
        raise ValueError("Every cluster count must be at least 2")
    return values


def dataset_recordings(directory: Path) -> List[Path]:
    """Recording directories of a dataset, or the directory itself if it is a recording."""
    directory = Path(directory)
    if (directory / 'script.json').is_file():
        return [directory]
    found = sorted(path for path in directory.glob('rec_*') if (path / 'script.json').is_file())
    if not found:
        raise ValueError(f"No recordings found in {directory}")
    return found


@dataclass
class SweepJob:
    recording_dir: Path
    n_clusters: int


def _sweep_job(cfg: ExperimentConfig, job: SweepJob) -> Tuple[SweepJob, Optional[ExperimentOutcome], Optional[str]]:
    job_cfg = ExperimentConfig(**{**cfg.model_dump(), 'n_clusters': job.n_clusters})
    try:
        recording = load_recording(job.recording_dir)
        outcome = run_experiment(job_cfg, recording, job.recording_dir.name, enrolled_inventory(job_cfg))
        return job, outcome, None
    except RUN_ERRORS as e:
        logger.warning(f"Sweep run {job.recording_dir.name} M={job.n_clusters} failed: {describe_error(e)}")
        return job, None, describe_error(e)


def sweep_agreement(outcomes: Sequence[ExperimentOutcome], recordings: Dict[str, SimulatedRecording],
                    low: int, high: int) -> Optional[float]:
    """Mean selection agreement between the smallest and largest M over recordings."""
    by_key = {(o.recording, o.css.inventory.size if o.css.inventory else None): o for o in outcomes}
    values = []
    for name, recording in recordings.items():
        a, b = by_key.get((name, low)), by_key.get((name, high))
        if a is None or b is None:
            continue
        references = speaker_references(recording)
        agreement = selection_agreement(selected_speakers(a.css, references), selected_speakers(b.css, references))
        if agreement is not None:
            values.append(agreement)
    return sum(values) / len(values) if values else None


async def cmd_sweep_clusters(args: argparse.Namespace) -> int:
    """Repeat the pipeline over several cluster counts and compare."""
    try:
        cfg = experiment_config(args)
        cluster_list = parse_cluster_list(args.clusters_list)
    except ValueError as e:
        logger.error(f"Invalid configuration: {e}")
        return 1

    output = Path(cfg.output_dir)
    try:
        output.mkdir(parents=True, exist_ok=True)
        if args.recordings is None:
            directories = [output / 'recordings' / recording_name(i) for i in range(cfg.count)]
            await run_limited(list(enumerate(directories)),
                              lambda item: simulate_one(cfg, item[0], item[1]), cfg.workers)
        else:
            directories = dataset_recordings(args.recordings)
    except RUN_ERRORS as e:
        logger.error(f"Sweep setup failed: {describe_error(e)}")
        return 1

    jobs = [SweepJob(directory, m) for m in cluster_list for directory in directories]
    results = await run_limited(jobs, lambda job: _sweep_job(cfg, job), cfg.workers)

    db = await open_database(output, cfg)
    run_ids = []
    for job, outcome, error in results:
        job_cfg = ExperimentConfig(**{**cfg.model_dump(), 'n_clusters': job.n_clusters})
        if outcome is not None:
            run_id = await store_outcome(db, 'sweep', job_cfg, outcome)
        else:
            run_id = await db.add_run('sweep', job.recording_dir.name, job.n_clusters, cfg.backend,
                                      cfg.seed, job_cfg.echo(), created_at=config.run_stamp())
            if run_id is not None:
                await db.mark_run_failed(run_id, error or 'unknown error')
        if run_id is not None:
            run_ids.append(run_id)

    wanted = set(run_ids)
    rows = [
        {key: value for key, value in row.items() if key != 'id'}
        for row in await db.get_sweep_rows('sweep') if row['id'] in wanted
    ]
    outcomes = [outcome for _, outcome, _ in results if outcome is not None]
    recordings = {}
    if len(cluster_list) > 1 and outcomes:
        try:
            recordings = {d.name: await asyncio.to_thread(load_recording, d) for d in directories}
        except RUN_ERRORS as e:
            logger.warning(f"Could not reload recordings for selection agreement: {describe_error(e)}")
    agreement = (await asyncio.to_thread(sweep_agreement, outcomes, recordings, cluster_list[0], cluster_list[-1])
                 if recordings else None)

    table = sweep_table(rows)
    if agreement is not None:
        table += f'profile selection agreement M={cluster_list[0]} vs M={cluster_list[-1]}: {agreement:.3f}\n'
    try:
        write_text(output / 'sweep.txt', table)
        write_json(output / 'sweep.json', {
            'config': cfg.echo(),
            'seed': cfg.seed,
            'clusters': cluster_list,
            'rows': rows,
            'spread_db': sweep_spread(rows),
            'selection_agreement': agreement,
        })
    except OSError as e:
        logger.error(f"Could not write sweep report: {describe_error(e)}")
        return 1

    failed = sum(1 for row in rows if row['status'] != 'ok')
    logger.info(f"Sweep finished: {len(rows)} runs, {failed} failed")
    print(table, end='')
    return 0


def read_streams(directory: Path) -> Tuple[Waveform, Waveform]:
    return read_wav(directory / 'stream_0.wav'), read_wav(directory / 'stream_1.wav')


def stream_segments(streams: Sequence[Waveform], bounds: Sequence[Tuple[float, float]]):
    return [(start, end, tuple(stream.slice(start, end) for stream in streams)) for start, end in bounds]


def segment_bounds(cfg: ExperimentConfig, streams_dir: Path, duration: float) -> List[Tuple[float, float]]:
    """Segment bounds of the run that produced the streams, else the configured plan."""
    log_path = streams_dir / 'css_log.json'
    if log_path.is_file():
        plan = json.loads(log_path.read_text(encoding='utf-8')).get('plan', {})
        if plan.get('segments'):
            return [(float(start), float(end)) for start, end in plan['segments']]
    return list(plan_segments(duration, cfg.window_s, cfg.hop_s).segments)


def _evaluate_streams(cfg: ExperimentConfig, streams_dir: Path, recording_dir: Path) -> Dict[str, Any]:
    recording = load_recording(recording_dir)
    streams = read_streams(streams_dir)
    for stream in streams:
        if len(stream) != len(recording.mixture):
            raise ValueError(
                f"Stream length {len(stream)} does not match the recording length {len(recording.mixture)}"
            )
    bounds = segment_bounds(cfg, streams_dir, recording.duration)
    system = streams_dir.name or 'streams'
    utterances, segments = evaluate(recording, system, streams, stream_segments(streams, bounds))
    text = '\n'.join([
        f'Recording {recording_dir.name}',
        '',
        'Segment-wise SI-SDR (dB) by overlap ratio (%)',
        bucket_table(segments),
        'Utterance-wise scores',
        utterance_table(utterances),
    ])
    return {
        'json': {
            'config': cfg.echo(),
            'seed': cfg.seed,
            'recording': recording_dir.name,
            'system': system,
            'utterance': {name: report.to_json() for name, report in utterances.items()},
            'segment': {name: report.to_json() for name, report in segments.items()},
        },
        'text': text,
    }


async def cmd_eval(args: argparse.Namespace) -> int:
    """Score existing stream WAVs against a simulated recording."""
    try:
        cfg = experiment_config(args)
    except ValueError as e:
        logger.error(f"Invalid configuration: {e}")
        return 1

    output = Path(cfg.output_dir)
    try:
        result = await asyncio.to_thread(_evaluate_streams, cfg, Path(args.streams), Path(args.recording))
        write_json(output / 'eval.json', result['json'])
        write_text(output / 'eval.txt', result['text'])
    except RUN_ERRORS as e:
        logger.error(f"Evaluation failed: {describe_error(e)}")
        return 1
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    pipeline = subparsers.add_parser('pipeline', help='separate one recording and score it')
    add_seed_and_output(pipeline)
    add_recipe_flags(pipeline)
    add_css_flags(pipeline)
    pipeline.add_argument('--recording', type=Path, help='recording directory; simulated when omitted')
    pipeline.add_argument('--dump-masks', action='store_true', help='also write per-segment MSK1 masks')
    pipeline.set_defaults(handler=cmd_pipeline)

    sweep = subparsers.add_parser('sweep-clusters', help='compare cluster counts over recordings')
    add_seed_and_output(sweep)
    add_recipe_flags(sweep)
    add_css_flags(sweep)
    sweep.add_argument('--clusters-list', default='2,3,4', help='comma-separated cluster counts')
    sweep.add_argument('--recordings', type=Path, help='dataset or recording directory; simulated when omitted')
    sweep.add_argument('--count', dest='count', type=int, help='recordings to simulate when none are given')
    sweep.add_argument('--workers', dest='workers', type=int, help='parallel runs')
    sweep.set_defaults(handler=cmd_sweep_clusters)

    evaluation = subparsers.add_parser('eval', help='score stream WAVs against a recording')
    add_seed_and_output(evaluation)
    evaluation.add_argument('--streams', type=Path, required=True, help='directory with stream_0.wav and stream_1.wav')
    evaluation.add_argument('--recording', type=Path, required=True, help='simulated recording directory')
    evaluation.add_argument('--window', dest='window_s', type=float, help='segment window when no css_log.json')
    evaluation.add_argument('--hop', dest='hop_s', type=float, help='segment hop when no css_log.json')
    evaluation.set_defaults(handler=cmd_eval)
