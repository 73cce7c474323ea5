"""Simulator of long multi-talker recordings with ground-truth scripts."""
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from scipy.signal import fftconvolve

import config
from audio import Waveform, read_wav, write_wav
from config import derive_seed
from metrics import max_concurrency, overlap_ratio

logger = logging.getLogger(__name__)

SEGMENT_SECONDS = 4.0
MIN_EPISODE_S = 3.0
MAX_EPISODE_S = 6.0
SOURCE_RMS = 0.1
HARMONIC_CEILING_HZ = 5000.0
AM_RATE_HZ = 4.0
RAMP_SECONDS = 0.01
MAX_SCRIPT_ATTEMPTS = 20
MAX_EPISODE_CANDIDATES = 12


class OverlapPattern(str, Enum):
    INCLUSIVE = 'inclusive'
    SEQUENTIAL = 'sequential'
    FULLY_OVERLAPPED = 'fully_overlapped'
    PARTIALLY_OVERLAPPED = 'partially_overlapped'


_PATTERNS = tuple(OverlapPattern)
_CUMULATIVE = np.cumsum([config.PATTERN_PROBABILITIES[p.value] for p in _PATTERNS])
_CUMULATIVE[-1] = 1.0


@dataclass(frozen=True)
class UtteranceEvent:
    speaker_id: int
    onset: float
    offset: float

    def __post_init__(self):
        if not 0.0 <= self.onset < self.offset:
            raise ValueError(f"Invalid utterance interval [{self.onset}, {self.offset}]")

    @property
    def duration(self) -> float:
        return self.offset - self.onset

    def to_json(self) -> Dict[str, Any]:
        return {'speaker': self.speaker_id, 'onset_s': self.onset, 'offset_s': self.offset}


@dataclass(frozen=True)
class RecordingScript:
    """Ground-truth utterance timeline; at most two speakers at any instant."""

    events: Tuple[UtteranceEvent, ...]
    duration: float
    speaker_ids: Tuple[int, ...] = ()

    def __post_init__(self):
        events = tuple(sorted(self.events, key=lambda e: (e.onset, e.offset, e.speaker_id)))
        ids = tuple(sorted(set(self.speaker_ids) | {e.speaker_id for e in events}))
        for event in events:
            if event.offset > self.duration + 1e-9:
                raise ValueError(f"Event {event} ends after the recording ({self.duration} s)")
        if max_concurrency(events) > 2:
            raise ValueError("More than two speakers active at the same time")
        object.__setattr__(self, 'events', events)
        object.__setattr__(self, 'speaker_ids', ids)

    def events_in(self, start: float, end: float) -> List[UtteranceEvent]:
        return [e for e in self.events if e.onset < end and e.offset > start]

    def active_speakers(self, start: float, end: float) -> List[int]:
        return sorted({e.speaker_id for e in self.events_in(start, end)})

    def to_json(self) -> Dict[str, Any]:
        return {
            'duration_s': self.duration,
            'speaker_ids': list(self.speaker_ids),
            'events': [e.to_json() for e in self.events],
        }

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> 'RecordingScript':
        events = tuple(
            UtteranceEvent(int(e['speaker']), float(e['onset_s']), float(e['offset_s']))
            for e in data['events']
        )
        return cls(events, float(data['duration_s']), tuple(int(i) for i in data.get('speaker_ids', ())))


@dataclass(frozen=True)
class SimulatedRecording:
    """Mixture with its clean sources, noise and script."""

    mixture: Waveform
    clean_sources: Dict[int, Waveform]
    script: RecordingScript
    noise: Waveform
    rt60: Optional[float] = None
    snr_db: Optional[float] = None

    def __post_init__(self):
        lengths = {len(self.mixture), len(self.noise)} | {len(s) for s in self.clean_sources.values()}
        rates = {self.mixture.sample_rate, self.noise.sample_rate} | {
            s.sample_rate for s in self.clean_sources.values()
        }
        if len(lengths) != 1 or len(rates) != 1:
            raise ValueError("All recording waveforms must share length and sample rate")

    @property
    def speaker_ids(self) -> Tuple[int, ...]:
        return tuple(sorted(self.clean_sources))

    @property
    def duration(self) -> float:
        return self.mixture.duration

    @property
    def sample_rate(self) -> int:
        return self.mixture.sample_rate


class SpeechCorpus(Protocol):
    """Anything that can produce an utterance for a speaker."""

    def utterance(self, speaker_id: int, duration: float, seed: int) -> Waveform:
        ...


def _voice_parameters(speaker_id: int) -> Tuple[float, float, np.ndarray, np.ndarray, np.ndarray]:
    # depends on the speaker only, so enrollments and recordings share a voice
    rng = np.random.default_rng([int(speaker_id), 0x51CE])
    f0 = 90.0 + 7.0 * (speaker_id % 40)
    tilt = rng.uniform(0.6, 1.4)
    centres = np.array([rng.uniform(300, 900), rng.uniform(900, 2500), rng.uniform(2500, 3800)])
    widths = 0.12 * centres
    gains = rng.uniform(1.0, 3.0, size=3)
    return f0, tilt, centres, widths, gains


def synth_speaker(speaker_id: int, duration: float, seed: int,
                  sample_rate: int = config.SAMPLE_RATE) -> Waveform:
    """
    Deterministic synthetic voice for a speaker.

    A harmonic comb at the speaker's fundamental, shaped by a spectral tilt and
    three formant-like bumps drawn from the speaker id, amplitude-modulated at 4 Hz.
    The seed only moves harmonic and modulation phases.
    """
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    if speaker_id < 0:
        raise ValueError(f"speaker_id must be non-negative, got {speaker_id}")
    n = int(round(duration * sample_rate))
    f0, tilt, centres, widths, gains = _voice_parameters(speaker_id)
    rng = np.random.default_rng([int(speaker_id), int(seed)])
    t = np.arange(n) / sample_rate

    n_harmonics = int(min(HARMONIC_CEILING_HZ, sample_rate / 2 - f0) // f0)
    harmonics = np.arange(1, n_harmonics + 1)
    freqs = harmonics * f0
    bumps = gains[None, :] * np.exp(-0.5 * ((freqs[:, None] - centres[None, :]) / widths[None, :]) ** 2)
    amplitudes = harmonics ** (-tilt) * (0.3 + bumps.sum(axis=1))
    phases = rng.uniform(0, 2 * np.pi, size=n_harmonics)

    samples = np.zeros(n)
    for freq, amp, phase in zip(freqs, amplitudes, phases):
        samples += amp * np.sin(2 * np.pi * freq * t + phase)
    samples *= 0.6 + 0.4 * np.sin(2 * np.pi * AM_RATE_HZ * t + rng.uniform(0, 2 * np.pi))

    ramp = min(int(RAMP_SECONDS * sample_rate), n // 2)
    if ramp:
        fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        samples[:ramp] *= fade
        samples[n - ramp:] *= fade[::-1]

    rms = np.sqrt(np.mean(samples ** 2)) if n else 0.0
    if rms > 0:
        samples *= SOURCE_RMS / rms
    return Waveform(samples, sample_rate)


class SyntheticCorpus:
    """Corpus of synthetic voices."""

    def __init__(self, sample_rate: int = config.SAMPLE_RATE):
        self.sample_rate = sample_rate

    def utterance(self, speaker_id: int, duration: float, seed: int) -> Waveform:
        return synth_speaker(speaker_id, duration, seed, self.sample_rate)


class WavCorpus:
    """Directory of spk<id>/*.wav files; utterances are looped or trimmed to length."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        if not self.root.is_dir():
            raise ValueError(f"Corpus directory not found: {self.root}")

    def speaker_files(self, speaker_id: int) -> List[Path]:
        return sorted((self.root / f'spk{speaker_id}').glob('*.wav'))

    def utterance(self, speaker_id: int, duration: float, seed: int) -> Waveform:
        files = self.speaker_files(speaker_id)
        if not files:
            raise ValueError(f"No WAV files for speaker {speaker_id} under {self.root}")
        rng = np.random.default_rng([int(speaker_id), int(seed)])
        source = read_wav(files[int(rng.integers(len(files)))])
        if len(source) == 0:
            raise ValueError(f"Empty WAV file for speaker {speaker_id}")
        n = int(round(duration * source.sample_rate))
        return Waveform(np.resize(source.samples, n), source.sample_rate)


def make_corpus(name: str) -> SpeechCorpus:
    """'synthetic' or a path to a WAV corpus directory."""
    if name == 'synthetic':
        return SyntheticCorpus()
    return WavCorpus(name)


def sample_pattern(rng: np.random.Generator) -> OverlapPattern:
    """Categorical draw over the four overlap patterns."""
    index = int(np.searchsorted(_CUMULATIVE, rng.random(), side='right'))
    return _PATTERNS[min(index, len(_PATTERNS) - 1)]


def _q(value: float) -> float:
    return round(float(value), 2)


def _pattern_events(pattern: OverlapPattern, length: float,
                    rng: np.random.Generator) -> List[Tuple[int, float, float]]:
    """Relative (role, onset, offset) timings of one episode; role 0 speaks first."""
    if pattern is OverlapPattern.FULLY_OVERLAPPED:
        return [(0, 0.0, length), (1, 0.0, length)]
    if pattern is OverlapPattern.SEQUENTIAL:
        gap = _q(rng.uniform(0.0, config.MAX_GAP_S))
        first = _q(rng.uniform(1.0, length - gap - 1.0))
        return [(0, 0.0, first), (1, _q(first + gap), length)]
    if pattern is OverlapPattern.INCLUSIVE:
        inner = _q(rng.uniform(config.MIN_OVERLAP_S, length - 1.0))
        start = _q(rng.uniform(0.1, length - 0.1 - inner))
        return [(0, 0.0, length), (1, start, _q(start + inner))]
    overlap = _q(rng.uniform(config.MIN_OVERLAP_S, min(2.5, length - 1.5)))
    start = _q(rng.uniform(0.5, length - 0.5 - overlap))
    return [(0, 0.0, _q(start + overlap)), (1, start, length)]


def _draw_episode(spk_a: int, spk_b: int, pattern: OverlapPattern, length: float,
                  rng: np.random.Generator) -> List[UtteranceEvent]:
    roles = (spk_a, spk_b) if rng.random() < 0.5 else (spk_b, spk_a)
    timings = _pattern_events(pattern, length, rng)
    if rng.random() < config.MUTE_PROBABILITY:
        muted = int(rng.integers(2))
        timings = [t for t in timings if t[0] != muted]
    return [UtteranceEvent(roles[role], onset, offset) for role, onset, offset in timings]


def synthetic_rir(rt60: float, seed: int, sample_rate: int = config.SAMPLE_RATE) -> np.ndarray:
    """
    Parametric room impulse response.

    Direct-path unit impulse plus a seeded Gaussian tail decaying by 60 dB over rt60,
    truncated at rt60. Tail energy grows linearly with rt60 (equal to the direct path
    at 0.5 s).
    """
    if not 0.0 < rt60 <= 1.0:
        raise ValueError(f"rt60 must be in (0, 1], got {rt60}")
    length = max(2, int(round(rt60 * sample_rate)))
    rng = np.random.default_rng(seed)
    t = np.arange(length) / sample_rate
    tail = rng.standard_normal(length) * np.exp(-np.log(1000.0) / rt60 * t)
    tail[0] = 0.0
    tail *= np.sqrt((rt60 / 0.5) / np.sum(tail ** 2))
    tail[0] = 1.0
    return tail


def apply_reverb(w: Waveform, rt60: float, seed: int) -> Waveform:
    """Convolve with a synthetic RIR, truncated to the input length."""
    rir = synthetic_rir(rt60, seed, w.sample_rate)
    if len(w) == 0:
        return w
    return Waveform(fftconvolve(w.samples, rir)[:len(w)], w.sample_rate)


def add_noise(w: Waveform, snr_db: float, seed: int) -> Tuple[Waveform, Waveform]:
    """White Gaussian noise at an exact SNR; returns (noisy, noise)."""
    signal_energy = w.energy
    if signal_energy <= 0.0:
        raise ValueError("cannot set SNR on silent signal")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal(len(w))
    scale = np.sqrt(signal_energy / (np.dot(raw, raw) * 10.0 ** (snr_db / 10.0)))
    noise = Waveform(raw * scale, w.sample_rate)
    return Waveform(w.samples + noise.samples, w.sample_rate), noise


def _render(script: RecordingScript, seed: int, corpus: SpeechCorpus,
            snr_db_range: Optional[Tuple[float, float]],
            rt60_range: Optional[Tuple[float, float]],
            sample_rate: int = config.SAMPLE_RATE) -> SimulatedRecording:
    """Synthesize sources, reverb and noise for a script."""
    n = int(round(script.duration * sample_rate))
    rng = np.random.default_rng(derive_seed(seed, 'room'))
    rt60 = float(rng.uniform(*rt60_range)) if rt60_range is not None else None
    snr_db = float(rng.uniform(*snr_db_range)) if snr_db_range is not None else None

    buffers = {speaker: np.zeros(n) for speaker in script.speaker_ids}
    for index, event in enumerate(script.events):
        start = int(round(event.onset * sample_rate))
        stop = min(n, int(round(event.offset * sample_rate)))
        utterance = corpus.utterance(event.speaker_id, (stop - start) / sample_rate,
                                     derive_seed(seed, f'utterance-{index}'))
        if rt60 is not None:
            utterance = apply_reverb(utterance, rt60, derive_seed(seed, f'rir-{event.speaker_id}'))
        buffers[event.speaker_id][start:stop] += utterance.samples[:stop - start]

    sources = {speaker: Waveform(samples, sample_rate) for speaker, samples in buffers.items()}
    speech = np.zeros(n)
    for speaker in sorted(sources):
        speech = speech + sources[speaker].samples
    if snr_db is not None and np.any(speech):
        _, noise = add_noise(Waveform(speech, sample_rate), snr_db, derive_seed(seed, 'noise'))
    else:
        noise = Waveform.silence(n, sample_rate)
    mixture = Waveform(speech + noise.samples, sample_rate)
    return SimulatedRecording(mixture, sources, script, noise, rt60, snr_db)


def generate_segment(spk_a: int, spk_b: int, pattern: OverlapPattern, seed: int,
                     corpus: Optional[SpeechCorpus] = None,
                     snr_db_range: Optional[Tuple[float, float]] = config.SNR_DB_RANGE,
                     rt60_range: Optional[Tuple[float, float]] = config.RT60_RANGE) -> SimulatedRecording:
    """Four-second two-speaker mixture realizing one overlap pattern."""
    if spk_a == spk_b:
        raise ValueError("generate_segment needs two different speakers")
    if spk_a < 0 or spk_b < 0:
        raise ValueError("speaker ids must be non-negative")
    rng = np.random.default_rng(derive_seed(seed, 'segment'))
    events = _draw_episode(spk_a, spk_b, OverlapPattern(pattern), SEGMENT_SECONDS, rng)
    script = RecordingScript(tuple(events), SEGMENT_SECONDS, (spk_a, spk_b))
    return _render(script, seed, corpus or SyntheticCorpus(), snr_db_range, rt60_range)


def _episode_stats(events: Sequence[UtteranceEvent]) -> Tuple[float, float]:
    """(overlapped seconds, active seconds) of one episode."""
    if len(events) == 1:
        return 0.0, events[0].duration
    first, second = events
    overlap = max(0.0, min(first.offset, second.offset) - max(first.onset, second.onset))
    return overlap, first.duration + second.duration - overlap


class _PairQueue:
    """Hands out speaker pairs so every speaker gets used early."""

    def __init__(self, speaker_ids: Sequence[int], rng: np.random.Generator):
        self.ids = list(speaker_ids)
        self.rng = rng
        self.queue: List[int] = []

    def next_pair(self) -> Tuple[int, int]:
        if len(self.queue) < 2:
            self.queue.extend(int(i) for i in self.rng.permutation(self.ids) if int(i) not in self.queue)
        first = self.queue.pop(0)
        second = self.queue.pop(0)
        return first, second


def _build_script(n_speakers: int, duration: float, target_overlap: float,
                  rng: np.random.Generator) -> RecordingScript:
    pairs = _PairQueue(range(n_speakers), rng)
    events: List[UtteranceEvent] = []
    overlapped = active = 0.0
    t = _q(rng.uniform(0.0, config.MAX_GAP_S))
    while duration - t >= MIN_EPISODE_S:
        length = _q(min(rng.uniform(MIN_EPISODE_S, MAX_EPISODE_S), duration - t))
        spk_a, spk_b = pairs.next_pair()
        current = overlapped / active if active else 0.0
        best = None
        for _ in range(MAX_EPISODE_CANDIDATES):
            candidate = _draw_episode(spk_a, spk_b, sample_pattern(rng), length, rng)
            ep_overlap, ep_active = _episode_stats(candidate)
            ratio = (overlapped + ep_overlap) / (active + ep_active)
            distance = abs(ratio - target_overlap)
            if best is None or distance < best[0]:
                best = (distance, candidate, ep_overlap, ep_active)
            if distance <= config.OVERLAP_TOLERANCE or distance < abs(current - target_overlap):
                break
        _, chosen, ep_overlap, ep_active = best
        events.extend(UtteranceEvent(e.speaker_id, _q(e.onset + t), _q(e.offset + t)) for e in chosen)
        overlapped += ep_overlap
        active += ep_active
        t = _q(t + length + rng.uniform(0.0, config.MAX_GAP_S))
    return RecordingScript(tuple(events), duration, tuple(range(n_speakers)))


def generate_script(n_speakers: int, duration: float, target_overlap: float, seed: int) -> RecordingScript:
    """
    Assemble a long-recording script from pattern episodes.

    Episodes of 3-6 s with rotating speaker pairs are separated by 0-0.5 s gaps;
    candidate episodes are rejected while they steer the running overlap ratio
    away from the target. Whole scripts are redrawn until the realized ratio is
    within tolerance and every speaker appears.
    """
    if n_speakers < 2:
        raise ValueError(f"n_speakers must be at least 2, got {n_speakers}")
    if duration < 10.0:
        raise ValueError(f"duration must be at least 10 s, got {duration}")
    if not 0.0 <= target_overlap < 1.0:
        raise ValueError(f"target_overlap must be in [0, 1), got {target_overlap}")
    if target_overlap >= config.MAX_OVERLAP_TARGET:
        raise ValueError(f"infeasible overlap target {target_overlap}")

    last_ratio = None
    for attempt in range(MAX_SCRIPT_ATTEMPTS):
        rng = np.random.default_rng(derive_seed(seed, f'script-{attempt}'))
        script = _build_script(n_speakers, duration, target_overlap, rng)
        last_ratio = overlap_ratio(script)
        used = {e.speaker_id for e in script.events}
        if abs(last_ratio - target_overlap) <= config.OVERLAP_TOLERANCE and len(used) == n_speakers:
            if attempt:
                logger.debug(f"Script accepted after {attempt + 1} attempts")
            return script
    raise ValueError(
        f"infeasible overlap target {target_overlap} for {n_speakers} speakers in {duration} s "
        f"(last realized ratio {last_ratio:.3f})"
    )


def generate_recording(n_speakers: int, duration: float, target_overlap: float, seed: int,
                       corpus: Optional[SpeechCorpus] = None,
                       snr_db_range: Optional[Tuple[float, float]] = config.SNR_DB_RANGE,
                       rt60_range: Optional[Tuple[float, float]] = config.RT60_RANGE) -> SimulatedRecording:
    """Long multi-talker recording with the requested overall overlap ratio."""
    script = generate_script(n_speakers, duration, target_overlap, seed)
    recording = _render(script, seed, corpus or SyntheticCorpus(), snr_db_range, rt60_range)
    logger.info(
        f"Simulated {duration:.0f} s recording: {n_speakers} speakers, "
        f"{len(script.events)} utterances, overlap {overlap_ratio(script):.3f}"
    )
    return recording


def enrollment_speakers(recording_ids: Iterable[int], n_irrelevant: int = 0) -> List[int]:
    """Recording speakers followed by n_irrelevant speakers absent from the recording."""
    ids = sorted(set(int(i) for i in recording_ids))
    start = (max(ids) + 1) if ids else 0
    return ids + list(range(start, start + n_irrelevant))


def generate_enrollments(speaker_ids: Iterable[int], seed: int,
                         duration: float = config.ENROLLMENT_SECONDS,
                         corpus: Optional[SpeechCorpus] = None) -> Dict[int, Waveform]:
    """One clean enrollment utterance per speaker."""
    corpus = corpus or SyntheticCorpus()
    return {
        int(speaker): corpus.utterance(int(speaker), duration, derive_seed(seed, f'enrollment-{speaker}'))
        for speaker in speaker_ids
    }


def _dump_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + '\n', encoding='utf-8')


def save_recording(recording: SimulatedRecording, directory: Union[str, Path],
                   meta: Optional[Dict[str, Any]] = None) -> Path:
    """Write mixture, sources, noise, script and meta into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_wav(directory / 'mixture.wav', recording.mixture)
    for speaker, source in recording.clean_sources.items():
        write_wav(directory / f'source_{speaker}.wav', source)
    write_wav(directory / 'noise.wav', recording.noise)
    _dump_json(directory / 'script.json', recording.script.to_json())
    info = dict(meta or {})
    info.update({'rt60_s': recording.rt60, 'snr_db': recording.snr_db})
    _dump_json(directory / 'meta.json', info)
    return directory


def load_recording(directory: Union[str, Path]) -> SimulatedRecording:
    directory = Path(directory)
    if not (directory / 'script.json').is_file():
        raise ValueError(f"Not a recording directory: {directory}")
    script = RecordingScript.from_json(json.loads((directory / 'script.json').read_text(encoding='utf-8')))
    meta = read_meta(directory)
    sources = {speaker: read_wav(directory / f'source_{speaker}.wav') for speaker in script.speaker_ids}
    return SimulatedRecording(
        read_wav(directory / 'mixture.wav'),
        sources,
        script,
        read_wav(directory / 'noise.wav'),
        meta.get('rt60_s'),
        meta.get('snr_db'),
    )


def read_meta(directory: Union[str, Path]) -> Dict[str, Any]:
    path = Path(directory) / 'meta.json'
    if not path.is_file():
        return {}
    return json.loads(path.read_text(encoding='utf-8'))
