"""Audio core: waveforms, STFT/iSTFT, masks and WAV I/O."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import check_COLA, get_window

import config

logger = logging.getLogger(__name__)

PCM_SCALE = 32768.0
_NORM_EPS = 1e-10


def _frozen_array(values, dtype) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Waveform:
    """Mono sampled signal."""

    samples: np.ndarray
    sample_rate: int = config.SAMPLE_RATE

    def __post_init__(self):
        samples = _frozen_array(self.samples, np.float64)
        if samples.ndim != 1:
            raise ValueError(f"Waveform must be mono, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("Waveform contains non-finite samples")
        object.__setattr__(self, 'samples', samples)

    @classmethod
    def silence(cls, n_samples: int, sample_rate: int = config.SAMPLE_RATE) -> 'Waveform':
        return cls(np.zeros(n_samples), sample_rate)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    @property
    def energy(self) -> float:
        return float(np.dot(self.samples, self.samples))

    @property
    def rms(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.sqrt(self.energy / len(self)))

    def to_index(self, seconds: float) -> int:
        return int(round(seconds * self.sample_rate))

    def slice(self, start_s: float, end_s: float) -> 'Waveform':
        """Cut [start_s, end_s) clamped to the signal."""
        start = max(0, self.to_index(start_s))
        end = min(len(self), self.to_index(end_s))
        return Waveform(self.samples[start:max(start, end)], self.sample_rate)

    def __add__(self, other: 'Waveform') -> 'Waveform':
        if self.sample_rate != other.sample_rate or len(self) != len(other):
            raise ValueError("Cannot add waveforms of different length or sample rate")
        return Waveform(self.samples + other.samples, self.sample_rate)

    def scaled(self, factor: float) -> 'Waveform':
        return Waveform(self.samples * factor, self.sample_rate)


@dataclass(frozen=True)
class StftConfig:
    """STFT analysis settings; the window is a periodic Hann of fft_size."""

    fft_size: int = config.FFT_SIZE
    hop: int = config.STFT_HOP
    window: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.fft_size <= 0 or self.fft_size & (self.fft_size - 1):
            raise ValueError(f"fft_size must be a power of two, got {self.fft_size}")
        if not 0 < self.hop <= self.fft_size:
            raise ValueError(f"hop must be in (0, fft_size], got {self.hop}")
        window = get_window('hann', self.fft_size)
        if not check_COLA(window, self.fft_size, self.fft_size - self.hop):
            raise ValueError(f"Hann window is not COLA at hop {self.hop}")
        object.__setattr__(self, 'window', _frozen_array(window, np.float64))

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def window_factor(self) -> float:
        """Average squared-window overlap per sample."""
        return float(np.sum(self.window ** 2) / self.hop)

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.fft_size) // self.hop + 1


@dataclass(frozen=True)
class Spectrogram:
    """Complex L x F time-frequency matrix."""

    bins: np.ndarray
    config: StftConfig
    sample_rate: int = config.SAMPLE_RATE

    def __post_init__(self):
        bins = _frozen_array(self.bins, np.complex128)
        if bins.ndim != 2 or bins.shape[1] != self.config.n_bins:
            raise ValueError(
                f"Spectrogram must have {self.config.n_bins} bins per frame, got shape {bins.shape}"
            )
        object.__setattr__(self, 'bins', bins)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bins.shape

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)

    def scaled(self, factor: float) -> 'Spectrogram':
        return Spectrogram(self.bins * factor, self.config, self.sample_rate)


@dataclass(frozen=True)
class Mask:
    """Real L x F mask with entries in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        values = _frozen_array(self.values, np.float64)
        if values.ndim != 2:
            raise ValueError(f"Mask must be two-dimensional, got shape {values.shape}")
        if values.size and (not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0):
            raise ValueError("Mask entries must lie in [0, 1]")
        object.__setattr__(self, 'values', values)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


def stft(w: Waveform, c: StftConfig = StftConfig()) -> Spectrogram:
    """
    Windowed FFT per frame, frames starting every hop samples.

    Args:
        w: Input waveform, at least one frame long
        c: STFT settings

    Returns:
        Spectrogram with floor((len - fft_size) / hop) + 1 frames
    """
    if len(w) < c.fft_size:
        raise ValueError(f"signal too short: {len(w)} samples < fft_size {c.fft_size}")
    frames = sliding_window_view(w.samples, c.fft_size)[::c.hop]
    bins = np.fft.rfft(frames * c.window, axis=1)
    return Spectrogram(bins, c, w.sample_rate)


def _frame_indices(n_frames: int, c: StftConfig) -> np.ndarray:
    return (np.arange(n_frames) * c.hop)[:, None] + np.arange(c.fft_size)[None, :]


def istft(s: Spectrogram) -> Waveform:
    """Weighted overlap-add synthesis; output length is (L - 1) * hop + fft_size."""
    c = s.config
    n_frames = s.shape[0]
    length = (n_frames - 1) * c.hop + c.fft_size if n_frames else 0
    out = np.zeros(length)
    norm = np.zeros(length)
    if n_frames:
        frames = np.fft.irfft(s.bins, n=c.fft_size, axis=1) * c.window
        index = _frame_indices(n_frames, c)
        np.add.at(out, index, frames)
        np.add.at(norm, index, np.broadcast_to(c.window ** 2, frames.shape))
    # samples where the window sum vanishes are left at zero
    covered = norm > _NORM_EPS
    out[covered] /= norm[covered]
    return Waveform(out, s.sample_rate)


def reliable_span(n_samples: int, c: StftConfig = StftConfig()) -> Tuple[int, int]:
    """Sample range where overlap-add normalization is complete."""
    return c.fft_size, max(c.fft_size, n_samples - c.fft_size)


def apply_mask(s: Spectrogram, m: Mask) -> Spectrogram:
    if s.shape != m.shape:
        raise ValueError(f"Mask shape {m.shape} does not match spectrogram shape {s.shape}")
    return Spectrogram(s.bins * m.values, s.config, s.sample_rate)


def _tail_padding(n_samples: int, c: StftConfig) -> int:
    return (-(n_samples + c.fft_size)) % c.hop


def padded_layout(n_samples: int, c: StftConfig = StftConfig()) -> Tuple[int, int]:
    """(frame count, leading padding) of padded_stft for a signal length."""
    padded = n_samples + 2 * c.fft_size + _tail_padding(n_samples, c)
    return c.n_frames(padded), c.fft_size


def padded_stft(w: Waveform, c: StftConfig = StftConfig()) -> Tuple[Spectrogram, int]:
    """
    STFT of a zero-padded copy so every original sample is fully covered.

    Returns the spectrogram and the number of samples of leading padding.
    The padded length is chosen so that istft reproduces it exactly.
    """
    padded = np.pad(w.samples, (c.fft_size, c.fft_size + _tail_padding(len(w), c)))
    return stft(Waveform(padded, w.sample_rate), c), c.fft_size


def crop(w: Waveform, offset: int, length: int) -> Waveform:
    return Waveform(w.samples[offset:offset + length], w.sample_rate)


def spectrogram_energy(s: Spectrogram) -> float:
    """Signal energy estimate from a one-sided spectrogram."""
    c = s.config
    weights = np.full(c.n_bins, 2.0)
    weights[0] = 1.0
    if c.fft_size % 2 == 0:
        weights[-1] = 1.0
    frame_energy = np.sum(weights * np.abs(s.bins) ** 2) / c.fft_size
    return float(frame_energy / c.window_factor)


def read_wav(path: Union[str, Path]) -> Waveform:
    """Read 16-bit mono PCM at the project sample rate."""
    if not Path(path).is_file():
        raise ValueError(f"{path}: no such file")
    data, sample_rate = sf.read(str(path), dtype='int16', always_2d=True)
    if data.shape[1] != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if sample_rate != config.SAMPLE_RATE:
        raise ValueError(f"{path}: expected {config.SAMPLE_RATE} Hz, got {sample_rate} Hz")
    return Waveform(data[:, 0].astype(np.float64) / PCM_SCALE, sample_rate)


def write_wav(path: Union[str, Path], w: Waveform) -> None:
    """Write 16-bit mono PCM, clipping to the representable range."""
    pcm = np.clip(np.round(w.samples * PCM_SCALE), -32768, 32767).astype(np.int16)
    peak = float(np.max(np.abs(w.samples))) if len(w) else 0.0
    if peak > 1.0:
        logger.warning(f"Clipping {path}: peak amplitude {peak:.3f}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), pcm, w.sample_rate, subtype='PCM_16', format='WAV')
