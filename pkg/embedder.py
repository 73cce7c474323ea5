"""Frame-level speaker embeddings, mean pooling and chunking."""
import json
import logging
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import librosa
import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import get_window

import config
from audio import Waveform

logger = logging.getLogger(__name__)

EMBEDDING_DIM = config.EMBEDDING_DIM
FRAME_SAMPLES = int(round(config.EMBED_FRAME_SECONDS * config.SAMPLE_RATE))
N_FFT = 1024
N_MELS = 64
N_COMB = 32
N_SHAPE = 16
N_MODULATION = 16
COMB_F0_GRID = np.geomspace(60.0, 400.0, N_COMB)
COMB_CEILING_HZ = 4000.0
COMB_WIDTH_HZ = 25.0
COMB_SMOOTH_BINS = 25
AUTOCORR_LAGS = np.arange(40, 181, 20)
BAND_EDGES_HZ = (0, 250, 500, 1000, 1500, 2000, 3000, 4000, 8000)
GROUP_WEIGHTS = (1.0, 2.0, 0.5, 0.5)
UNIT_TOL = 1e-6
HEADER = struct.Struct('<4sII')
EMB_MAGIC = b'EMB1'

# offsets and scales of the shape group:
# centroid, spread, rolloff85, rolloff50, flatness, tilt, flux, zcr, then 8 log band ratios
SHAPE_OFFSET = np.array([0.10, 0.10, 0.15, 0.05, 0.10, -0.80, 0.05, 0.05] + [-3.0] * 8)
SHAPE_SCALE = np.array([0.05, 0.05, 0.10, 0.05, 0.10, 0.50, 0.05, 0.05] + [2.0] * 8)


@dataclass(frozen=True)
class Embedding:
    """Unit-norm speaker vector."""

    vector: np.ndarray

    def __post_init__(self):
        vector = np.array(self.vector, dtype=np.float64, copy=True)
        if vector.ndim != 1:
            raise ValueError(f"Embedding must be a vector, got shape {vector.shape}")
        if abs(np.linalg.norm(vector) - 1.0) > UNIT_TOL:
            raise ValueError("Embedding must have unit norm")
        vector.setflags(write=False)
        object.__setattr__(self, 'vector', vector)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    def cosine(self, other: 'Embedding') -> float:
        return float(np.dot(self.vector, other.vector))


@dataclass(frozen=True)
class EmbeddingSequence:
    """T x K frame embeddings; silent frames are zero rows flagged in `silent`."""

    frames: np.ndarray
    silent: np.ndarray
    frame_hop: float = config.EMBED_FRAME_SECONDS
    source_duration: float = 0.0

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64, copy=True)
        silent = np.array(self.silent, dtype=bool, copy=True)
        if frames.ndim != 2 or silent.shape != (frames.shape[0],):
            raise ValueError("frames must be T x K with one silence flag per row")
        norms = np.linalg.norm(frames[~silent], axis=1)
        if norms.size and np.max(np.abs(norms - 1.0)) > UNIT_TOL:
            raise ValueError("Non-silent embedding rows must have unit norm")
        frames.setflags(write=False)
        silent.setflags(write=False)
        object.__setattr__(self, 'frames', frames)
        object.__setattr__(self, 'silent', silent)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def voiced(self) -> np.ndarray:
        return self.frames[~self.silent]


@dataclass
class ChunkEmbeddings:
    """Pooled embeddings of non-silent chunks, keyed by chunk index."""

    items: List[Tuple[int, Embedding]]
    silent_indices: List[int] = field(default_factory=list)
    chunk_seconds: float = config.CHUNK_SECONDS

    @property
    def indices(self) -> List[int]:
        return [index for index, _ in self.items]

    def matrix(self) -> np.ndarray:
        if not self.items:
            return np.zeros((0, EMBEDDING_DIM))
        return np.stack([emb.vector for _, emb in self.items])

    def __len__(self) -> int:
        return len(self.items)


@lru_cache(maxsize=1)
def _mel_basis() -> np.ndarray:
    return librosa.filters.mel(sr=config.SAMPLE_RATE, n_fft=N_FFT, n_mels=N_MELS, fmin=50.0, fmax=8000.0)


@lru_cache(maxsize=1)
def _comb_templates() -> np.ndarray:
    freqs = np.fft.rfftfreq(N_FFT, 1.0 / config.SAMPLE_RATE)
    templates = np.zeros((N_COMB, freqs.size))
    for row, f0 in enumerate(COMB_F0_GRID):
        for harmonic in np.arange(f0, COMB_CEILING_HZ, f0):
            templates[row] += np.exp(-0.5 * ((freqs - harmonic) / COMB_WIDTH_HZ) ** 2)
    templates[:, freqs >= COMB_CEILING_HZ] = 0.0
    return templates / np.linalg.norm(templates, axis=1, keepdims=True)


@lru_cache(maxsize=2)
def _window(n: int) -> np.ndarray:
    return get_window('hann', n)


def _power(frames: np.ndarray) -> np.ndarray:
    windowed = frames * _window(frames.shape[1])
    return np.abs(np.fft.rfft(windowed, n=N_FFT, axis=1)) ** 2


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def _log_mel(power: np.ndarray) -> np.ndarray:
    mel = power @ _mel_basis().T
    floor = 1e-4 * mel.max(axis=1, keepdims=True) + 1e-20
    logmel = np.log(mel + floor)
    return logmel - logmel.mean(axis=1, keepdims=True)


def _comb(power: np.ndarray) -> np.ndarray:
    """
    Harmonic-comb correlations of the spectral peak prominence below 4 kHz.

    The log magnitude minus its local average keeps the harmonic lines and drops
    the spectral envelope.
    """
    band = np.fft.rfftfreq(N_FFT, 1.0 / config.SAMPLE_RATE) < COMB_CEILING_HZ
    banded = power[:, band]
    log_mag = 0.5 * np.log(banded + 1e-8 * banded.max(axis=1, keepdims=True) + 1e-20)
    smooth = uniform_filter1d(log_mag, COMB_SMOOTH_BINS, axis=1, mode='nearest')
    prominence = np.maximum(log_mag - smooth, 0.0)
    corr = _unit_rows(prominence) @ _comb_templates()[:, band].T
    feats = np.log(corr + 0.05)
    return feats - feats.mean(axis=1, keepdims=True)


def _shape(frames: np.ndarray, power: np.ndarray) -> np.ndarray:
    nyquist = config.SAMPLE_RATE / 2.0
    freqs = np.fft.rfftfreq(N_FFT, 1.0 / config.SAMPLE_RATE)
    p = power + 1e-20
    dist = p / p.sum(axis=1, keepdims=True)
    centroid = dist @ freqs
    spread = np.sqrt(np.sum(dist * (freqs[None, :] - centroid[:, None]) ** 2, axis=1))
    cumulative = np.cumsum(dist, axis=1)
    rolloff85 = freqs[np.argmax(cumulative >= 0.85, axis=1)]
    rolloff50 = freqs[np.argmax(cumulative >= 0.50, axis=1)]
    flatness = np.exp(np.mean(np.log(p), axis=1)) / np.mean(p, axis=1)

    log_p = np.log10(p + 1e-10 * p.max(axis=1, keepdims=True))
    f_khz = freqs / 1000.0
    f_centred = f_khz - f_khz.mean()
    tilt = ((log_p - log_p.mean(axis=1, keepdims=True)) @ f_centred) / np.sum(f_centred ** 2)

    half = frames.shape[1] // 2
    first = _power(frames[:, :half]) + 1e-20
    second = _power(frames[:, half:2 * half]) + 1e-20
    flux = np.linalg.norm(
        first / first.sum(axis=1, keepdims=True) - second / second.sum(axis=1, keepdims=True), axis=1
    )
    zcr = np.mean(np.abs(np.diff(np.signbit(frames).astype(np.int8), axis=1)), axis=1)

    bands = [
        np.sum(dist[:, (freqs >= lo) & (freqs < hi)], axis=1)
        for lo, hi in zip(BAND_EDGES_HZ[:-1], BAND_EDGES_HZ[1:])
    ]
    band_ratios = np.log(np.stack(bands, axis=1) + 1e-4)

    stats = np.column_stack([
        centroid / nyquist, spread / nyquist, rolloff85 / nyquist, rolloff50 / nyquist,
        flatness, tilt, flux, zcr,
    ])
    return (np.hstack([stats, band_ratios]) - SHAPE_OFFSET) / SHAPE_SCALE


def _modulation(frames: np.ndarray) -> np.ndarray:
    blocks = frames.reshape(frames.shape[0], 8, -1)
    log_energy = np.log(np.mean(blocks ** 2, axis=2) + 1e-12)
    log_energy -= log_energy.mean(axis=1, keepdims=True)
    energy = np.sum(frames ** 2, axis=1) + 1e-20
    autocorr = np.column_stack([
        np.sum(frames[:, :-lag] * frames[:, lag:], axis=1) / energy for lag in AUTOCORR_LAGS
    ])
    return np.hstack([log_energy, autocorr / 0.5])


def frame_features(frames: np.ndarray) -> np.ndarray:
    """Weighted 128-dim features of a batch of 640-sample frames, before normalization."""
    power = _power(frames)
    groups = (_log_mel(power), _comb(power), _shape(frames, power), _modulation(frames))
    return np.hstack([weight * _unit_rows(g) for weight, g in zip(GROUP_WEIGHTS, groups)])


def embed_frames(w: Waveform) -> EmbeddingSequence:
    """
    Embed every non-overlapping 40 ms frame.

    Each frame gives 64 centred log-mel energies, 32 harmonic-comb correlations,
    16 spectral-shape statistics and 16 modulation features. Groups are unit
    scaled and weighted, then the whole row is unit-normalized. Frames whose RMS
    is below the silence threshold become zero rows flagged as silent.
    """
    if w.sample_rate != config.SAMPLE_RATE:
        raise ValueError(f"Embeddings need {config.SAMPLE_RATE} Hz audio, got {w.sample_rate} Hz")
    n_frames = len(w) // FRAME_SAMPLES
    if n_frames == 0:
        raise ValueError(f"signal too short for one {config.EMBED_FRAME_SECONDS * 1000:.0f} ms frame")
    frames = w.samples[:n_frames * FRAME_SAMPLES].reshape(n_frames, FRAME_SAMPLES)
    silent = np.sqrt(np.mean(frames ** 2, axis=1)) < config.SILENCE_RMS
    embeddings = np.zeros((n_frames, EMBEDDING_DIM))
    if np.any(~silent):
        features = frame_features(frames[~silent])
        voiced = np.flatnonzero(~silent)
        degenerate = np.linalg.norm(features, axis=1) == 0
        silent[voiced[degenerate]] = True
        embeddings[voiced[~degenerate]] = _unit_rows(features[~degenerate])
    return EmbeddingSequence(embeddings, silent, config.EMBED_FRAME_SECONDS, w.duration)


def mean_pool(seq: EmbeddingSequence) -> Embedding:
    """Mean of the non-silent rows, re-normalized."""
    rows = seq.voiced
    if rows.shape[0] == 0:
        raise ValueError("no speech content: every frame is silent")
    mean = rows.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise ValueError("no speech content: pooled embedding has zero norm")
    return Embedding(mean / norm)


def frames_per_chunk(chunk: float = config.CHUNK_SECONDS) -> int:
    return int(round(chunk / config.EMBED_FRAME_SECONDS))


def chunk_embeddings(w: Waveform, chunk: float = config.CHUNK_SECONDS) -> ChunkEmbeddings:
    """Pooled embeddings of non-overlapping chunks; silent chunks are only listed by index."""
    if w.duration + 1e-9 < chunk:
        raise ValueError(f"signal shorter than one {chunk} s chunk")
    seq = embed_frames(w)
    per_chunk = frames_per_chunk(chunk)
    items: List[Tuple[int, Embedding]] = []
    silent: List[int] = []
    for index in range(len(seq) // per_chunk):
        part = slice(index * per_chunk, (index + 1) * per_chunk)
        sub = EmbeddingSequence(seq.frames[part], seq.silent[part], seq.frame_hop, chunk)
        try:
            items.append((index, mean_pool(sub)))
        except ValueError:
            silent.append(index)
    logger.debug(f"Chunked {w.duration:.1f} s into {len(items)} voiced and {len(silent)} silent chunks")
    return ChunkEmbeddings(items, silent, chunk)


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix('.json')


def write_embeddings(path: Union[str, Path], matrix: np.ndarray,
                     sidecar: Optional[Dict[str, Any]] = None, magic: bytes = EMB_MAGIC) -> Path:
    """Write rows x K float32 little-endian after a magic/rows/K header, plus a JSON sidecar."""
    path = Path(path)
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    rows, dim = matrix.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as handle:
        handle.write(HEADER.pack(magic, rows, dim))
        handle.write(matrix.astype('<f4').tobytes())
    _sidecar_path(path).write_text(json.dumps(sidecar or {}, sort_keys=True, indent=2) + '\n', encoding='utf-8')
    return path


def read_embeddings(path: Union[str, Path], magic: bytes = EMB_MAGIC) -> Tuple[np.ndarray, Dict[str, Any]]:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < HEADER.size:
        raise ValueError(f"{path}: truncated header")
    found, rows, dim = HEADER.unpack_from(data)
    if found != magic:
        raise ValueError(f"{path}: bad magic {found!r}, expected {magic!r}")
    expected = HEADER.size + rows * dim * 4
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    matrix = np.frombuffer(data, dtype='<f4', offset=HEADER.size).reshape(rows, dim).astype(np.float64)
    sidecar_path = _sidecar_path(path)
    sidecar = json.loads(sidecar_path.read_text(encoding='utf-8')) if sidecar_path.is_file() else {}
    return matrix, sidecar


def save_chunk_embeddings(path: Union[str, Path], chunks: ChunkEmbeddings,
                          extra: Optional[Dict[str, Any]] = None) -> Path:
    sidecar = dict(extra or {})
    sidecar.update({
        'chunk_seconds': chunks.chunk_seconds,
        'chunk_indices': chunks.indices,
        'start_s': [round(i * chunks.chunk_seconds, 6) for i in chunks.indices],
        'silent_indices': list(chunks.silent_indices),
    })
    return write_embeddings(path, chunks.matrix(), sidecar)


def load_chunk_embeddings(path: Union[str, Path]) -> ChunkEmbeddings:
    """Chunk embeddings from an EMB1 file, e.g. produced by an external embedder."""
    matrix, sidecar = read_embeddings(path)
    indices = sidecar.get('chunk_indices', list(range(matrix.shape[0])))
    if len(indices) != matrix.shape[0]:
        raise ValueError(f"{path}: sidecar lists {len(indices)} chunks for {matrix.shape[0]} rows")
    rows = _unit_rows(matrix)
    items = [(int(i), Embedding(row)) for i, row in zip(indices, rows) if np.linalg.norm(row) > 0]
    return ChunkEmbeddings(items, [int(i) for i in sidecar.get('silent_indices', [])],
                           float(sidecar.get('chunk_seconds', config.CHUNK_SECONDS)))
