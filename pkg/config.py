"""Configuration module for the speaker-inventory separation toolkit."""
import hashlib
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple

import pytz
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

# Audio
SAMPLE_RATE = 16000
FFT_SIZE = 512
STFT_HOP = 256

# Embeddings: 1.2 s chunks hold exactly 30 frames of 40 ms
EMBEDDING_DIM = 128
EMBED_FRAME_SECONDS = 0.04
CHUNK_SECONDS = 1.2
SILENCE_RMS = 1e-4

# Segmentation and stitching
SEGMENT_WINDOW_S = 4.0
SEGMENT_HOP_S = 3.0
STITCH_SILENCE_RMS = 1e-3

# Simulation recipe
PATTERN_PROBABILITIES = {
    'inclusive': 0.10,
    'sequential': 0.20,
    'fully_overlapped': 0.35,
    'partially_overlapped': 0.35,
}
MUTE_PROBABILITY = 0.1
MIN_OVERLAP_S = 1.0
MAX_GAP_S = 0.5
SNR_DB_RANGE = (0.0, 20.0)
RT60_RANGE = (0.1, 0.5)
ENROLLMENT_SECONDS = 10.0
OVERLAP_TOLERANCE = 0.05
MAX_OVERLAP_TARGET = 0.95

# Profile selection
SELECTION_SCALE = 10.0

# Separation
AFFINITY_TEMPERATURE = 10.0
AFFINITY_SILENCE_LOGIT = 0.0
IRM_FLOOR = 1e-8

# Reports
SCORE_CAP_DB = 60.0
RESULTS_DB_NAME = 'results.db'
RUN_STAMP_FORMAT = '%Y-%m-%d %H:%M:%S'

# Logging
LOG_TIMEZONE = 'UTC'


def derive_seed(seed: int, name: str) -> int:
    """Derive a named sub-seed: seed XOR the first four bytes of sha256(name)."""
    digest = hashlib.sha256(name.encode('utf-8')).digest()
    return (int(seed) ^ int.from_bytes(digest[:4], 'little')) & 0xFFFFFFFF


def run_stamp() -> str:
    """
    Creation stamp stored with pipeline runs.

    Taken from SOURCE_DATE_EPOCH when set, else the Unix epoch, so reruns store
    the same bytes.
    """
    epoch = int(os.getenv('SOURCE_DATE_EPOCH', '0'))
    return datetime.fromtimestamp(epoch, tz=pytz.utc).strftime(RUN_STAMP_FORMAT)


class ExperimentConfig(BaseModel):
    """Validated settings for one experiment run."""

    model_config = ConfigDict(extra='forbid', frozen=True)

    seed: int = 0
    n_speakers: int = 2
    duration_s: float = 60.0
    target_overlap: float = 0.30
    count: int = 1
    n_clusters: int = 4
    window_s: float = SEGMENT_WINDOW_S
    hop_s: float = SEGMENT_HOP_S
    backend: Literal['oracle', 'affinity'] = 'affinity'
    inventory_mode: Literal['self', 'enrolled'] = 'self'
    profile_condition: Literal['selected', 'two_correct', 'one_correct', 'two_wrong'] = 'selected'
    stitch_method: Literal['xcorr', 'spectral'] = 'xcorr'
    strict_average: bool = False
    output_dir: Path = Path('runs')
    corpus: str = 'synthetic'
    enrollment_dir: Optional[Path] = None
    n_irrelevant: int = 0
    snr_db_min: Optional[float] = SNR_DB_RANGE[0]
    snr_db_max: Optional[float] = SNR_DB_RANGE[1]
    rt60_min: Optional[float] = RT60_RANGE[0]
    rt60_max: Optional[float] = RT60_RANGE[1]
    workers: int = 1
    log_timezone: str = LOG_TIMEZONE

    @field_validator('n_speakers')
    @classmethod
    def _check_speakers(cls, value: int) -> int:
        if value < 2:
            raise ValueError("n_speakers must be at least 2")
        return value

    @field_validator('duration_s')
    @classmethod
    def _check_duration(cls, value: float) -> float:
        if value < 10.0:
            raise ValueError("duration_s must be at least 10 seconds")
        return value

    @field_validator('target_overlap')
    @classmethod
    def _check_overlap(cls, value: float) -> float:
        if not 0.0 <= value < 1.0:
            raise ValueError("target_overlap must be in [0, 1)")
        return value

    @field_validator('n_clusters')
    @classmethod
    def _check_clusters(cls, value: int) -> int:
        if value < 2:
            raise ValueError("n_clusters must be at least 2")
        return value

    @field_validator('count', 'workers')
    @classmethod
    def _check_positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be a positive integer")
        return value

    @field_validator('n_irrelevant')
    @classmethod
    def _check_irrelevant(cls, value: int) -> int:
        if value < 0:
            raise ValueError("n_irrelevant must not be negative")
        return value

    @model_validator(mode='after')
    def _check_consistency(self) -> 'ExperimentConfig':
        if not 0.0 < self.hop_s < self.window_s:
            raise ValueError("hop_s must be positive and smaller than window_s")
        if self.hop_s < self.window_s / 2:
            raise ValueError("hop_s must be at least half of window_s")
        if self.duration_s < self.window_s:
            raise ValueError("duration_s must be at least window_s")
        if (self.snr_db_min is None) != (self.snr_db_max is None):
            raise ValueError("snr_db_min and snr_db_max must be set together")
        if self.snr_db_min is not None and self.snr_db_min > self.snr_db_max:
            raise ValueError("snr_db_min must not exceed snr_db_max")
        if (self.rt60_min is None) != (self.rt60_max is None):
            raise ValueError("rt60_min and rt60_max must be set together")
        if self.rt60_min is not None and not 0.0 < self.rt60_min <= self.rt60_max <= 1.0:
            raise ValueError("rt60 range must satisfy 0 < rt60_min <= rt60_max <= 1")
        if self.profile_condition != 'selected' and self.inventory_mode != 'enrolled':
            raise ValueError("profile conditions other than 'selected' need an enrolled inventory")
        return self

    @property
    def snr_db_range(self) -> Optional[Tuple[float, float]]:
        if self.snr_db_min is None:
            return None
        return (self.snr_db_min, self.snr_db_max)

    @property
    def rt60_range(self) -> Optional[Tuple[float, float]]:
        if self.rt60_min is None:
            return None
        return (self.rt60_min, self.rt60_max)

    def echo(self) -> Dict[str, Any]:
        """Config echo stored in artifacts; the output location is left out."""
        data = self.model_dump(mode='json', exclude={'output_dir', 'workers', 'log_timezone'})
        return dict(sorted(data.items()))


def _parse_value(raw: Optional[str]) -> Any:
    """Turn a config-file string into None for empty/none values."""
    if raw is None:
        return None
    value = raw.strip()
    if value == '' or value.lower() == 'none':
        return None
    return value


def read_config_file(path: Path) -> Dict[str, Any]:
    """Read a plain KEY = value file without touching the environment."""
    if not Path(path).is_file():
        raise ValueError(f"Config file not found: {path}")
    values = dotenv_values(path)
    return {key.strip().lower(): _parse_value(raw) for key, raw in values.items()}


def load_experiment_config(path: Optional[Path] = None,
                           overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Build an ExperimentConfig from defaults, an optional file and flag overrides.

    Args:
        path: Optional KEY = value config file
        overrides: Values from command-line flags; None entries are ignored

    Returns:
        Validated ExperimentConfig
    """
    data: Dict[str, Any] = {}
    if path is not None:
        data.update(read_config_file(path))
    if overrides:
        data.update({key: value for key, value in overrides.items() if value is not None})
    return ExperimentConfig(**data)
