"""Evaluation metrics: SNR, SI-SDR, overlap ratio and segment/utterance reports."""
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

import config
from audio import Waveform

if TYPE_CHECKING:
    from simulator import RecordingScript, SimulatedRecording, UtteranceEvent

logger = logging.getLogger(__name__)

CAP_DB = config.SCORE_CAP_DB
ACTIVE_RMS = 1e-6
BUCKETS = ('0', '0-25', '25-50', '50-75', '75-100')

Signal = Union[Waveform, np.ndarray]
Metric = Callable[[Signal, Signal], float]


def _samples(x: Signal) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def _capped_ratio_db(numerator: float, denominator: float) -> float:
    if denominator <= 0.0:
        return CAP_DB
    if numerator <= 0.0:
        return -CAP_DB
    return float(np.clip(10.0 * np.log10(numerator / denominator), -CAP_DB, CAP_DB))


def snr(ref: Signal, est: Signal) -> float:
    """10 log10(|s|^2 / |s - est|^2), capped at +-60 dB."""
    s, e = _samples(ref), _samples(est)
    if s.shape != e.shape:
        raise ValueError(f"Length mismatch: {s.shape} vs {e.shape}")
    energy = float(np.dot(s, s))
    if energy == 0.0:
        raise ValueError("snr needs a non-silent reference")
    diff = s - e
    return _capped_ratio_db(energy, float(np.dot(diff, diff)))


def si_sdr(ref: Signal, est: Signal) -> float:
    """Scale-invariant SDR: project est on ref and compare projection with residual."""
    s, e = _samples(ref), _samples(est)
    if s.shape != e.shape:
        raise ValueError(f"Length mismatch: {s.shape} vs {e.shape}")
    ref_energy = float(np.dot(s, s))
    if ref_energy == 0.0 or not np.any(e):
        raise ValueError("si_sdr needs non-silent reference and estimate")
    alpha = float(np.dot(e, s)) / ref_energy
    target = alpha * s
    residual = e - target
    return _capped_ratio_db(float(np.dot(target, target)), float(np.dot(residual, residual)))


METRICS: Dict[str, Metric] = {'snr': snr, 'si_sdr': si_sdr}


def resolve_metric(metric: Union[str, Metric]) -> Tuple[str, Metric]:
    if callable(metric):
        return getattr(metric, '__name__', 'metric'), metric
    if metric not in METRICS:
        raise ValueError(f"Unknown metric '{metric}', expected one of {sorted(METRICS)}")
    return metric, METRICS[metric]


def _coverage(events: Iterable['UtteranceEvent'], start: float, end: float) -> List[Tuple[float, float, int]]:
    """Elementary intervals of [start, end] with the number of distinct active speakers."""
    clipped = [(max(e.onset, start), min(e.offset, end), e.speaker_id) for e in events]
    clipped = [c for c in clipped if c[0] < c[1]]
    bounds = sorted({start, end} | {c[0] for c in clipped} | {c[1] for c in clipped})
    pieces = []
    for t0, t1 in zip(bounds[:-1], bounds[1:]):
        if t1 <= t0:
            continue
        speakers = {spk for on, off, spk in clipped if on <= t0 and off >= t1}
        pieces.append((t0, t1, len(speakers)))
    return pieces


def max_concurrency(events: Sequence['UtteranceEvent']) -> int:
    if not events:
        return 0
    start = min(e.onset for e in events)
    end = max(e.offset for e in events)
    return max((n for _, _, n in _coverage(events, start, end)), default=0)


def overlap_ratio(script: 'RecordingScript', window: Optional[Tuple[float, float]] = None) -> float:
    """Overlapped speech time over speech-active time; 0 when nothing is active."""
    start, end = window if window is not None else (0.0, script.duration)
    pieces = _coverage(script.events, start, end)
    active = sum(t1 - t0 for t0, t1, n in pieces if n >= 1)
    if active <= 0.0:
        return 0.0
    overlapped = sum(t1 - t0 for t0, t1, n in pieces if n >= 2)
    return float(min(1.0, overlapped / active))


def overlap_bucket(ratio: float) -> str:
    """Bucket label: 0 | 0-25 | 25-50 | 50-75 | 75-100 (upper bounds inclusive)."""
    if ratio <= 0.0:
        return BUCKETS[0]
    for upper, label in zip((0.25, 0.50, 0.75), BUCKETS[1:4]):
        if ratio <= upper + 1e-12:
            return label
    return BUCKETS[4]


def _is_active(x: Signal) -> bool:
    s = _samples(x)
    return s.size > 0 and float(np.sqrt(np.mean(s ** 2))) > ACTIVE_RMS


def _score(metric: Metric, ref: Signal, est: Signal) -> float:
    if not np.any(_samples(est)):
        return -CAP_DB
    return metric(ref, est)


def eval_segment(outputs: Sequence[Signal], truth: Sequence[Signal],
                 metric: Union[str, Metric] = 'si_sdr') -> Optional[float]:
    """
    Best-permutation score of two outputs against two references.

    Returns None when both references are silent. With one active reference
    only that reference is scored, against whichever output matches it best.
    """
    if len(outputs) != 2 or len(truth) != 2:
        raise ValueError("eval_segment expects two outputs and two references")
    _, fn = resolve_metric(metric)
    active = [i for i, t in enumerate(truth) if _is_active(t)]
    if not active:
        return None
    if len(active) == 1:
        ref = truth[active[0]]
        return max(_score(fn, ref, out) for out in outputs)
    identity = (_score(fn, truth[0], outputs[0]) + _score(fn, truth[1], outputs[1])) / 2.0
    swapped = (_score(fn, truth[0], outputs[1]) + _score(fn, truth[1], outputs[0])) / 2.0
    return max(identity, swapped)


@dataclass
class EvalReport:
    """Per-item scores with overlap buckets and averages."""

    metric: str
    items: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def scores(self) -> List[float]:
        return [item['score'] for item in self.items]

    @property
    def mean(self) -> Optional[float]:
        return float(np.mean(self.scores)) if self.items else None

    def bucket_means(self) -> Dict[str, Dict[str, Any]]:
        result = {}
        for bucket in BUCKETS:
            values = [item['score'] for item in self.items if item.get('bucket') == bucket]
            result[bucket] = {'count': len(values), 'mean': float(np.mean(values)) if values else None}
        return result

    def to_json(self) -> Dict[str, Any]:
        return {
            'metric': self.metric,
            'mean': self.mean,
            'count': len(self.items),
            'buckets': self.bucket_means(),
            'items': self.items,
        }


def segment_truths(recording: 'SimulatedRecording', start: float,
                   end: float) -> Tuple[Tuple[int, ...], List[Waveform], Waveform]:
    """
    The two most energetic speakers of a window, ordered by id, and the residual.

    Returns (speaker ids, reference waveforms padded to two, residual waveform).
    The residual holds noise plus every other speaker. A lone active speaker
    keeps the slot given by its position among the recording's speakers.
    """
    mixture = recording.mixture.slice(start, end)
    sources = {spk: src.slice(start, end) for spk, src in recording.clean_sources.items()}
    ranked = sorted(sources, key=lambda spk: (-sources[spk].energy, spk))
    chosen = tuple(sorted(spk for spk in ranked[:2] if sources[spk].energy > 0.0))
    silence = Waveform.silence(len(mixture), mixture.sample_rate)
    if len(chosen) == 2:
        refs = [sources[spk] for spk in chosen]
    elif len(chosen) == 1:
        slot = recording.speaker_ids.index(chosen[0]) % 2
        refs = [sources[chosen[0]], silence] if slot == 0 else [silence, sources[chosen[0]]]
    else:
        refs = [silence, silence]
    residual = mixture.samples - refs[0].samples - refs[1].samples
    return chosen, refs, Waveform(residual, mixture.sample_rate)


def _segment_items(segments: Any) -> Iterable[Tuple[float, float, Sequence[Waveform]]]:
    return getattr(segments, 'segment_outputs', segments)


def eval_segments(segments: Any, recording: 'SimulatedRecording',
                  metric: Union[str, Metric] = 'si_sdr') -> EvalReport:
    """Segment-wise evaluation grouped by the segment's overlap ratio."""
    name, fn = resolve_metric(metric)
    report = EvalReport(name)
    for index, (start, end, outputs) in enumerate(_segment_items(segments)):
        _, refs, _ = segment_truths(recording, start, end)
        value = eval_segment(outputs, refs, fn)
        if value is None:
            continue
        ratio = overlap_ratio(recording.script, (start, end))
        report.items.append({
            'segment': index,
            'start_s': round(start, 4),
            'end_s': round(end, 4),
            'overlap_ratio': round(ratio, 6),
            'bucket': overlap_bucket(ratio),
            'score': value,
        })
    return report


def eval_utterances(streams: Any, recording: 'SimulatedRecording',
                    metric: Union[str, Metric] = 'si_sdr') -> EvalReport:
    """Score every scripted utterance against the better of the two streams."""
    name, fn = resolve_metric(metric)
    pair = getattr(streams, 'streams', streams)
    report = EvalReport(name)
    for event in recording.script.events:
        ref = recording.clean_sources[event.speaker_id].slice(event.onset, event.offset)
        if not _is_active(ref):
            continue
        scores = [_score(fn, ref, stream.slice(event.onset, event.offset)) for stream in pair]
        best = int(np.argmax(scores))
        ratio = overlap_ratio(recording.script, (event.onset, event.offset))
        report.items.append({
            'speaker': event.speaker_id,
            'onset_s': event.onset,
            'offset_s': event.offset,
            'stream': best,
            'overlap_ratio': round(ratio, 6),
            'bucket': overlap_bucket(ratio),
            'score': scores[best],
        })
    return report


def unprocessed_streams(recording: 'SimulatedRecording') -> Tuple[Waveform, Waveform]:
    """Baseline: both streams are the mixture itself."""
    return recording.mixture, recording.mixture


def unprocessed_segments(recording: 'SimulatedRecording',
                         bounds: Sequence[Tuple[float, float]]) -> List[Tuple[float, float, Tuple[Waveform, Waveform]]]:
    items = []
    for start, end in bounds:
        mix = recording.mixture.slice(start, end)
        items.append((start, end, (mix, mix)))
    return items
