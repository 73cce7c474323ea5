"""Profile-biased segment separation with pluggable mask backends."""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence, Tuple, Union

import numpy as np

import config
from audio import Mask, Spectrogram, StftConfig, Waveform, apply_mask, crop, istft, padded_layout, padded_stft
from embedder import FRAME_SAMPLES, Embedding, embed_frames, read_embeddings, write_embeddings
from selector import SelectedProfiles

logger = logging.getLogger(__name__)

MASK_MAGIC = b'MSK1'

Vector = Union[Embedding, np.ndarray]


@dataclass(frozen=True)
class AdaptedFeatures:
    """L x 2K features: columns [0, K) follow profile p1, [K, 2K) profile p2."""

    values: np.ndarray

    @property
    def dim(self) -> int:
        return self.values.shape[1] // 2

    def similarities(self) -> np.ndarray:
        """L x 2 sums of each half, i.e. the dot product of every frame with each profile."""
        return self.values.reshape(self.values.shape[0], 2, self.dim).sum(axis=2)


@dataclass(frozen=True)
class SeparationResult:
    outputs: Tuple[Waveform, Waveform]
    masks: Tuple[Mask, Mask]
    profiles_used: Optional[SelectedProfiles] = None


def _vector(e: Vector) -> np.ndarray:
    return e.vector if isinstance(e, Embedding) else np.asarray(e, dtype=np.float64)


def adapt_features(b: np.ndarray, e_p1: Vector, e_p2: Vector) -> AdaptedFeatures:
    """Multiply every feature frame element-wise by each profile and concatenate."""
    b = np.asarray(b, dtype=np.float64)
    v1, v2 = _vector(e_p1), _vector(e_p2)
    if b.ndim != 2:
        raise ValueError(f"Feature matrix must be L x K, got shape {b.shape}")
    if v1.shape != (b.shape[1],) or v2.shape != (b.shape[1],):
        raise ValueError(f"Profile dimension does not match feature dimension {b.shape[1]}")
    return AdaptedFeatures(np.hstack([b * v1[None, :], b * v2[None, :]]))


def oracle_irm_masks(sources: Sequence[Spectrogram], floor: float = config.IRM_FLOOR,
                     residual: Optional[Spectrogram] = None) -> Tuple[Mask, Mask]:
    """Ideal ratio masks |S1| / (|S1| + |S2| + |R| + floor) and the symmetric one."""
    first, second = sources
    if first.shape != second.shape or (residual is not None and residual.shape != first.shape):
        raise ValueError("Reference spectrograms must share one shape")
    mag1, mag2 = first.magnitude, second.magnitude
    denominator = mag1 + mag2 + floor
    if residual is not None:
        denominator = denominator + residual.magnitude
    return Mask(mag1 / denominator), Mask(mag2 / denominator)


def affinity_weights(segment: Waveform, profiles: SelectedProfiles,
                     temperature: float = config.AFFINITY_TEMPERATURE) -> Tuple[np.ndarray, np.ndarray]:
    """Per embedder frame, softmax over (p1 similarity, p2 similarity, silence)."""
    if len(segment) < FRAME_SAMPLES:
        return np.zeros(0), np.zeros(0)
    seq = embed_frames(segment)
    logits = temperature * adapt_features(seq.frames, profiles.e_p1, profiles.e_p2).similarities()
    logits1, logits2 = logits[:, 0], logits[:, 1]
    silence = np.full(len(seq), config.AFFINITY_SILENCE_LOGIT)
    top = np.maximum(np.maximum(logits1, logits2), silence)
    z1, z2, z0 = np.exp(logits1 - top), np.exp(logits2 - top), np.exp(silence - top)
    total = z1 + z2 + z0
    w1, w2 = z1 / total, z2 / total
    w1[seq.silent] = 0.0
    w2[seq.silent] = 0.0
    return w1, w2


def affinity_masks(segment: Waveform, profiles: SelectedProfiles,
                   temperature: float = config.AFFINITY_TEMPERATURE,
                   stft_config: StftConfig = StftConfig()) -> Tuple[Mask, Mask]:
    """
    Soft masks from frame-wise profile affinity.

    Frame weights are linearly interpolated onto the STFT frame centres of the
    padded segment analysis and broadcast across all frequency bins.
    """
    n_frames, offset = padded_layout(len(segment), stft_config)
    n_bins = stft_config.n_bins
    w1, w2 = affinity_weights(segment, profiles, temperature)
    if w1.size == 0:
        zeros = np.zeros((n_frames, n_bins))
        return Mask(zeros), Mask(zeros)
    embed_centres = (np.arange(w1.size) + 0.5) * FRAME_SAMPLES
    stft_centres = np.arange(n_frames) * stft_config.hop + stft_config.fft_size / 2 - offset
    m1 = np.interp(stft_centres, embed_centres, w1)
    m2 = np.interp(stft_centres, embed_centres, w2)
    return (Mask(np.repeat(m1[:, None], n_bins, axis=1)),
            Mask(np.repeat(m2[:, None], n_bins, axis=1)))


class MaskBackend(Protocol):
    name: str

    def masks(self, segment: Waveform, spec: Spectrogram,
              profiles: Optional[SelectedProfiles]) -> Tuple[Mask, Mask]:
        ...


@dataclass(frozen=True)
class OracleIRM:
    """Ideal ratio masks from reference sources; outputs follow the reference order."""

    references: Optional[Tuple[Waveform, Waveform]] = None
    residual: Optional[Waveform] = None
    floor: float = config.IRM_FLOOR
    name: str = 'oracle'

    def masks(self, segment: Waveform, spec: Spectrogram,
              profiles: Optional[SelectedProfiles]) -> Tuple[Mask, Mask]:
        if self.references is None:
            raise ValueError("OracleIRM needs reference sources for every segment")
        refs = []
        for ref in self.references:
            if len(ref) != len(segment):
                raise ValueError("Reference length does not match the segment")
            refs.append(padded_stft(ref, spec.config)[0])
        residual = padded_stft(self.residual, spec.config)[0] if self.residual is not None else None
        return oracle_irm_masks(refs, self.floor, residual)


@dataclass(frozen=True)
class Affinity:
    """Embedding-affinity masks; outputs follow (p1, p2)."""

    temperature: float = config.AFFINITY_TEMPERATURE
    name: str = 'affinity'

    def masks(self, segment: Waveform, spec: Spectrogram,
              profiles: Optional[SelectedProfiles]) -> Tuple[Mask, Mask]:
        if profiles is None:
            raise ValueError("Affinity backend needs selected profiles")
        return affinity_masks(segment, profiles, self.temperature, spec.config)


def separate_segment(segment: Waveform, profiles: Optional[SelectedProfiles],
                     backend: MaskBackend, stft_config: StftConfig = StftConfig()) -> SeparationResult:
    """Mask the padded segment STFT with mixture phase and resynthesize two outputs."""
    spec, offset = padded_stft(segment, stft_config)
    mask1, mask2 = backend.masks(segment, spec, profiles)
    outputs = tuple(
        crop(istft(apply_mask(spec, mask)), offset, len(segment)) for mask in (mask1, mask2)
    )
    return SeparationResult(outputs, (mask1, mask2), profiles)


def write_mask(path: Union[str, Path], mask: Mask) -> Path:
    return write_embeddings(path, mask.values, {'frames': mask.shape[0], 'bins': mask.shape[1]}, MASK_MAGIC)


def read_mask(path: Union[str, Path]) -> Mask:
    values, _ = read_embeddings(path, MASK_MAGIC)
    return Mask(np.clip(values, 0.0, 1.0))
