"""Continuous separation: segment, select profiles, separate and stitch."""
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import TYPE_CHECKING, Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

import config
from audio import Mask, StftConfig, Waveform, stft
from config import derive_seed
from embedder import Embedding, embed_frames
from inventory import SpeakerInventory, build_inventory_self, nearest_speakers
from metrics import segment_truths
from selector import PROFILE_CONDITIONS, SelectedProfiles, profiles_for_condition, score, top_k
from separator import Affinity, OracleIRM, SeparationResult, separate_segment

if TYPE_CHECKING:
    from simulator import SimulatedRecording

logger = logging.getLogger(__name__)

BACKENDS = ('oracle', 'affinity')
STITCH_METHODS = ('xcorr', 'spectral')


class Permutation(IntEnum):
    IDENTITY = 0
    SWAP = 1

    def compose(self, other: 'Permutation') -> 'Permutation':
        return Permutation(int(self) ^ int(other))


class SegmentProcessingError(RuntimeError):
    """A segment failed; carries the segment index."""

    def __init__(self, segment_index: int, cause: Exception):
        super().__init__(f"segment {segment_index}: {cause}")
        self.segment_index = segment_index
        self.cause = cause


@dataclass(frozen=True)
class SegmentPlan:
    window: float
    hop: float
    segments: Tuple[Tuple[float, float], ...]

    def __len__(self) -> int:
        return len(self.segments)


class SegmentOutput(NamedTuple):
    start: float
    end: float
    outputs: Tuple[Waveform, Waveform]


@dataclass(frozen=True)
class CssConfig:
    n_clusters: int = 4
    seed: int = 0
    backend: str = 'affinity'
    window: float = config.SEGMENT_WINDOW_S
    hop: float = config.SEGMENT_HOP_S
    stitch_method: str = 'xcorr'
    strict_average: bool = False
    temperature: float = config.AFFINITY_TEMPERATURE
    profile_condition: str = 'selected'
    chunk_seconds: float = config.CHUNK_SECONDS

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"Unknown backend '{self.backend}', expected one of {BACKENDS}")
        if self.stitch_method not in STITCH_METHODS:
            raise ValueError(f"Unknown stitch method '{self.stitch_method}'")
        if self.profile_condition not in PROFILE_CONDITIONS:
            raise ValueError(f"Unknown profile condition '{self.profile_condition}'")
        if not self.window / 2 <= self.hop < self.window:
            raise ValueError("hop must be in [window / 2, window)")
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be at least 2")

    @classmethod
    def from_experiment(cls, experiment: 'config.ExperimentConfig') -> 'CssConfig':
        return cls(
            n_clusters=experiment.n_clusters,
            seed=experiment.seed,
            backend=experiment.backend,
            window=experiment.window_s,
            hop=experiment.hop_s,
            stitch_method=experiment.stitch_method,
            strict_average=experiment.strict_average,
            profile_condition=experiment.profile_condition,
        )


@dataclass
class CssResult:
    """Two continuous streams plus everything needed to inspect the run."""

    streams: Tuple[Waveform, Waveform]
    inventory: Optional[SpeakerInventory]
    plan: SegmentPlan
    log: List[Dict[str, Any]] = field(default_factory=list)
    segment_outputs: List[SegmentOutput] = field(default_factory=list)
    masks: List[Tuple[Mask, ...]] = field(default_factory=list)

    @property
    def permutations(self) -> List[Permutation]:
        return [Permutation(entry['permutation'] == 'swap') for entry in self.log]


def plan_segments(duration: float, window: float = config.SEGMENT_WINDOW_S,
                  hop: float = config.SEGMENT_HOP_S) -> SegmentPlan:
    """
    Uniform segments every hop seconds plus an end-aligned final segment.

    A recording shorter than the window is a single segment. When the final
    segment would reach back into the segment two positions earlier it replaces
    its predecessor, so no sample is covered by more than two segments.
    """
    if not 0.0 < hop < window:
        raise ValueError(f"hop must be in (0, window), got hop={hop}, window={window}")
    if duration <= window + 1e-9:
        return SegmentPlan(window, hop, ((0.0, round(duration, 6)),))
    segments: List[Tuple[float, float]] = []
    k = 0
    while round(k * hop + window, 6) < duration - 1e-9:
        start = round(k * hop, 6)
        segments.append((start, round(start + window, 6)))
        k += 1
    final = (round(duration - window, 6), round(duration, 6))
    if len(segments) >= 2 and final[0] < segments[-2][1]:
        segments[-1] = final
    else:
        segments.append(final)
    return SegmentPlan(window, hop, tuple(segments))


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    return float(np.dot(a, b) / norm) if norm > 0 else 0.0


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x ** 2))) if x.size else 0.0


def _spectral_cost(a: np.ndarray, b: np.ndarray, c: StftConfig) -> float:
    return float(np.mean((stft(Waveform(a), c).magnitude - stft(Waveform(b), c).magnitude) ** 2))


def stitch_pair(prev_out: Sequence[Waveform], next_out: Sequence[Waveform], overlap: float,
                method: str = 'xcorr', threshold: float = config.STITCH_SILENCE_RMS) -> Permutation:
    """
    Channel permutation of next_out that best continues prev_out.

    Compares the last `overlap` seconds of prev_out with the first `overlap`
    seconds of next_out. If either pair is silent there, identity is kept.
    """
    if overlap <= 0:
        raise ValueError("stitching needs a positive overlap")
    sample_rate = prev_out[0].sample_rate
    n = min(int(round(overlap * sample_rate)), len(prev_out[0]), len(next_out[0]))
    prev = [w.samples[len(w) - n:] for w in prev_out]
    nxt = [w.samples[:n] for w in next_out]
    if max(_rms(x) for x in prev) < threshold or max(_rms(x) for x in nxt) < threshold:
        return Permutation.IDENTITY

    c = StftConfig()
    if method == 'spectral' and n >= c.fft_size:
        identity = _spectral_cost(prev[0], nxt[0], c) + _spectral_cost(prev[1], nxt[1], c)
        swapped = _spectral_cost(prev[0], nxt[1], c) + _spectral_cost(prev[1], nxt[0], c)
        return Permutation.SWAP if swapped < identity else Permutation.IDENTITY
    identity = _ncc(prev[0], nxt[0]) + _ncc(prev[1], nxt[1])
    swapped = _ncc(prev[0], nxt[1]) + _ncc(prev[1], nxt[0])
    return Permutation.SWAP if swapped > identity else Permutation.IDENTITY


def crossfade_weights(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """(fade_in, fade_out) linear ramps over n samples that sum to one."""
    fade_in = (np.arange(n) + 0.5) / n
    return fade_in, 1.0 - fade_in


def _oriented(outputs: Tuple[Waveform, Waveform], perm: Permutation) -> Tuple[Waveform, Waveform]:
    return outputs if perm is Permutation.IDENTITY else (outputs[1], outputs[0])


def _silent_streams(mixture: Waveform, plan: SegmentPlan) -> CssResult:
    silence = Waveform.silence(len(mixture), mixture.sample_rate)
    result = CssResult((silence, silence), None, plan)
    for index, (start, end) in enumerate(plan.segments):
        seg = Waveform.silence(len(mixture.slice(start, end)), mixture.sample_rate)
        result.segment_outputs.append(SegmentOutput(start, end, (seg, seg)))
        result.masks.append(())
        result.log.append({'index': index, 'start_s': start, 'end_s': end, 'profiles': None,
                           'top5': [], 'stitch': 'identity', 'permutation': 'identity', 'silent': True})
    return result


def _separate(index: int, start: float, end: float, mixture: Waveform, inv: SpeakerInventory,
              cfg: CssConfig, truth: Optional['SimulatedRecording']) -> Tuple[SeparationResult, Dict[str, Any]]:
    segment = mixture.slice(start, end)
    entry: Dict[str, Any] = {'index': index, 'start_s': start, 'end_s': end, 'backend': cfg.backend}
    seq = embed_frames(segment)
    profiles: Optional[SelectedProfiles] = None
    if np.any(~seq.silent):
        scores = score(seq, inv, strict=cfg.strict_average)
        segment_ids: Tuple[int, ...] = ()
        recording_ids: Tuple[int, ...] = ()
        if truth is not None:
            segment_ids = segment_truths(truth, start, end)[0]
            recording_ids = truth.speaker_ids
        profiles = profiles_for_condition(cfg.profile_condition, inv, scores, segment_ids, recording_ids,
                                          seed=derive_seed(cfg.seed, f'segment-{index}'))
        entry['profiles'] = [profiles.p1_index, profiles.p2_index]
        entry['top5'] = top_k(scores)
    else:
        entry['profiles'] = None
        entry['top5'] = []
    entry['silent'] = profiles is None

    if cfg.backend == 'oracle':
        if truth is None:
            raise ValueError("OracleIRM needs the ground-truth recording")
        ids, refs, residual = segment_truths(truth, start, end)
        entry['oracle_speakers'] = list(ids)
        backend = OracleIRM(tuple(refs), residual)
    elif profiles is None:
        silence = Waveform.silence(len(segment), segment.sample_rate)
        return SeparationResult((silence, silence), (), None), entry
    else:
        backend = Affinity(cfg.temperature)
    return separate_segment(segment, profiles, backend), entry


def run_css(mixture: Waveform, cfg: CssConfig, inventory: Optional[SpeakerInventory] = None,
            truth: Optional['SimulatedRecording'] = None) -> CssResult:
    """
    Separate a long recording into two continuous streams.

    Args:
        mixture: The recording
        cfg: Pipeline settings
        inventory: Enrolled inventory; built from the mixture when None
        truth: Simulated recording, needed by the oracle backend and forced profile conditions

    Returns:
        CssResult with streams, inventory, per-segment log and oriented segment outputs
    """
    plan = plan_segments(mixture.duration, cfg.window, cfg.hop)
    if mixture.rms < config.SILENCE_RMS:
        logger.info("Recording is silent; returning silent streams")
        return _silent_streams(mixture, plan)

    if inventory is None:
        inventory = build_inventory_self(mixture, cfg.n_clusters, derive_seed(cfg.seed, 'kmeans'),
                                         cfg.chunk_seconds)

    results: List[SeparationResult] = []
    entries: List[Dict[str, Any]] = []
    for index, (start, end) in enumerate(plan.segments):
        try:
            result, entry = _separate(index, start, end, mixture, inventory, cfg, truth)
        except (ValueError, IndexError) as e:
            raise SegmentProcessingError(index, e) from e
        results.append(result)
        entries.append(entry)

    perms = [Permutation.IDENTITY]
    entries[0]['stitch'] = 'identity'
    for index in range(1, len(results)):
        overlap = plan.segments[index - 1][1] - plan.segments[index][0]
        local = stitch_pair(results[index - 1].outputs, results[index].outputs, overlap, cfg.stitch_method)
        entries[index]['stitch'] = 'swap' if local is Permutation.SWAP else 'identity'
        perms.append(perms[-1].compose(local))

    sample_rate = mixture.sample_rate
    n = len(mixture)
    streams = np.zeros((2, n))
    css = CssResult((mixture, mixture), inventory, plan)
    bounds = [(mixture.to_index(s), min(n, mixture.to_index(e))) for s, e in plan.segments]
    for index, ((start, end), perm) in enumerate(zip(plan.segments, perms)):
        a, b = bounds[index]
        outputs = _oriented(results[index].outputs, perm)
        weight = np.ones(b - a)
        if index > 0:
            fade_len = max(0, bounds[index - 1][1] - a)
            weight[:fade_len] = crossfade_weights(fade_len)[0]
        if index + 1 < len(bounds):
            fade_len = max(0, b - bounds[index + 1][0])
            if fade_len:
                weight[b - a - fade_len:] = crossfade_weights(fade_len)[1]
        for channel in range(2):
            streams[channel, a:b] += weight * outputs[channel].samples
        entries[index]['permutation'] = 'swap' if perm is Permutation.SWAP else 'identity'
        css.segment_outputs.append(SegmentOutput(start, end, outputs))
        masks = results[index].masks
        css.masks.append(masks[::-1] if masks and perm is Permutation.SWAP else masks)

    css.streams = (Waveform(streams[0], sample_rate), Waveform(streams[1], sample_rate))
    css.log = entries
    logger.info(
        f"Separated {mixture.duration:.1f} s in {len(plan)} segments with {cfg.backend} backend, "
        f"{sum(1 for p in perms if p is Permutation.SWAP)} swapped segments"
    )
    return css


def selected_speakers(result: CssResult, references: Dict[int, Embedding]) -> List[Optional[Tuple[int, ...]]]:
    """Profiles selected per segment, each mapped to its nearest true speaker."""
    if result.inventory is None or not references:
        return [None] * len(result.log)
    nearest = nearest_speakers(result.inventory, references)
    return [
        None if entry.get('profiles') is None else tuple(sorted(nearest[i] for i in entry['profiles']))
        for entry in result.log
    ]


def selection_agreement(a: Sequence[Optional[Tuple[int, ...]]],
                        b: Sequence[Optional[Tuple[int, ...]]]) -> Optional[float]:
    """Fraction of segments, non-silent in both runs, that selected the same speakers."""
    pairs = [(x, y) for x, y in zip(a, b) if x is not None and y is not None]
    if not pairs:
        return None
    return sum(1 for x, y in pairs if x == y) / len(pairs)
