"""Speaker inventory: enrolled profiles or k-means centroids of mixture chunks."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.cluster import kmeans_plusplus

import config
from audio import Waveform
from embedder import ChunkEmbeddings, Embedding, chunk_embeddings, embed_frames, mean_pool, read_embeddings, write_embeddings

if TYPE_CHECKING:
    from simulator import SimulatedRecording

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnrolledProvenance:
    speaker_ids: Tuple[int, ...]

    def to_json(self) -> Dict[str, Any]:
        return {'kind': 'enrolled', 'speaker_ids': list(self.speaker_ids)}


@dataclass(frozen=True)
class ClusteredProvenance:
    sizes: Tuple[int, ...]
    inertia: float
    chunk_indices: Tuple[int, ...] = ()
    assignments: Tuple[int, ...] = ()
    seed: Optional[int] = None
    chunk_seconds: float = config.CHUNK_SECONDS

    def to_json(self) -> Dict[str, Any]:
        return {
            'kind': 'clustered',
            'sizes': list(self.sizes),
            'inertia': self.inertia,
            'chunk_indices': list(self.chunk_indices),
            'assignments': list(self.assignments),
            'seed': self.seed,
            'chunk_seconds': self.chunk_seconds,
        }


Provenance = Union[EnrolledProvenance, ClusteredProvenance]


@dataclass(frozen=True)
class SpeakerInventory:
    """M unit-norm profiles with their origin."""

    profiles: np.ndarray
    provenance: Provenance

    def __post_init__(self):
        profiles = np.array(self.profiles, dtype=np.float64, copy=True)
        if profiles.ndim != 2 or profiles.shape[0] < 2:
            raise ValueError(f"An inventory needs at least 2 profiles, got shape {profiles.shape}")
        if np.max(np.abs(np.linalg.norm(profiles, axis=1) - 1.0)) > 1e-6:
            raise ValueError("Inventory profiles must have unit norm")
        profiles.setflags(write=False)
        object.__setattr__(self, 'profiles', profiles)

    @property
    def size(self) -> int:
        return self.profiles.shape[0]

    def profile(self, index: int) -> Embedding:
        return Embedding(self.profiles[index])

    @property
    def speaker_ids(self) -> Optional[Tuple[int, ...]]:
        if isinstance(self.provenance, EnrolledProvenance):
            return self.provenance.speaker_ids
        return None


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    history: List[float] = field(default_factory=list)
    n_iter: int = 0


def _assign(points: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    distances = cdist(points, centroids, 'sqeuclidean')
    labels = np.argmin(distances, axis=1)
    return labels, distances[np.arange(points.shape[0]), labels]


def kmeans(points: np.ndarray, n_clusters: int, seed: int, max_iter: int = 100,
           tol: float = 1e-6, init: Optional[np.ndarray] = None) -> KMeansResult:
    """
    Lloyd's k-means with k-means++ seeding.

    Args:
        points: N x K data
        n_clusters: number of clusters M, at most N
        seed: seed for k-means++ initialization
        max_iter: maximum Lloyd iterations
        tol: stop when no centroid moves more than this
        init: optional M x K initial centroids replacing k-means++

    Returns:
        KMeansResult with the inertia recorded after every assignment step
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be N x K, got shape {points.shape}")
    if n_clusters < 1:
        raise ValueError("n_clusters must be at least 1")
    if points.shape[0] < n_clusters:
        raise ValueError(f"fewer points than clusters: {points.shape[0]} < {n_clusters}")
    if not np.all(np.isfinite(points)):
        raise ValueError("points must be finite")

    if init is None:
        centroids, _ = kmeans_plusplus(points, n_clusters, random_state=seed)
    else:
        centroids = np.array(init, dtype=np.float64, copy=True)
        if centroids.shape != (n_clusters, points.shape[1]):
            raise ValueError(f"init must have shape {(n_clusters, points.shape[1])}")

    history: List[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels, nearest = _assign(points, centroids)
        history.append(float(nearest.sum()))
        updated = centroids.copy()
        counts = np.bincount(labels, minlength=n_clusters)
        for cluster in range(n_clusters):
            if counts[cluster]:
                updated[cluster] = points[labels == cluster].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            # farthest points from their current centroid seed the empty clusters
            order = np.argsort(-nearest, kind='stable')
            for cluster, point in zip(empty, order):
                updated[cluster] = points[point]
            logger.debug(f"Reseeded {empty.size} empty clusters")
        shift = float(np.max(np.linalg.norm(updated - centroids, axis=1)))
        centroids = updated
        if shift < tol:
            break

    labels, nearest = _assign(points, centroids)
    inertia = float(nearest.sum())
    history.append(inertia)
    return KMeansResult(centroids, labels, inertia, history, n_iter)


def build_inventory_from_enrollments(enrollments: Sequence[Waveform],
                                     speaker_ids: Optional[Sequence[int]] = None) -> SpeakerInventory:
    """One profile per enrollment utterance, in order."""
    if len(enrollments) < 2:
        raise ValueError(f"An enrolled inventory needs at least 2 enrollments, got {len(enrollments)}")
    ids = tuple(int(i) for i in speaker_ids) if speaker_ids is not None else tuple(range(len(enrollments)))
    if len(ids) != len(enrollments):
        raise ValueError("speaker_ids must match the number of enrollments")
    profiles = []
    for index, enrollment in enumerate(enrollments):
        try:
            profiles.append(mean_pool(embed_frames(enrollment)).vector)
        except ValueError as e:
            raise ValueError(f"enrollment {index} has no speech content: {e}") from e
    return SpeakerInventory(np.stack(profiles), EnrolledProvenance(ids))


def build_inventory_from_chunks(chunks: ChunkEmbeddings, n_clusters: int, seed: int) -> SpeakerInventory:
    """Cluster chunk embeddings; re-normalized centroids become the profiles."""
    if len(chunks) < n_clusters:
        raise ValueError(
            f"too few non-silent chunks: {len(chunks)} available, {n_clusters} clusters requested"
        )
    result = kmeans(chunks.matrix(), n_clusters, seed)
    norms = np.linalg.norm(result.centroids, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("k-means produced a zero-norm centroid")
    sizes = np.bincount(result.assignments, minlength=n_clusters)
    provenance = ClusteredProvenance(
        sizes=tuple(int(s) for s in sizes),
        inertia=result.inertia,
        chunk_indices=tuple(chunks.indices),
        assignments=tuple(int(a) for a in result.assignments),
        seed=seed,
        chunk_seconds=chunks.chunk_seconds,
    )
    logger.info(
        f"Clustered {len(chunks)} chunks into {n_clusters} profiles "
        f"(sizes {provenance.sizes}, inertia {result.inertia:.4f}, {result.n_iter} iterations)"
    )
    return SpeakerInventory(result.centroids / norms, provenance)


def build_inventory_self(mixture: Waveform, n_clusters: int, seed: int,
                         chunk: float = config.CHUNK_SECONDS) -> SpeakerInventory:
    """Self-informed inventory built from the mixture's own chunk embeddings."""
    return build_inventory_from_chunks(chunk_embeddings(mixture, chunk), n_clusters, seed)


@dataclass
class PurityReport:
    clusters: List[Dict[str, Any]] = field(default_factory=list)
    overall: Optional[float] = None
    labelled_chunks: int = 0

    def to_json(self) -> Dict[str, Any]:
        return {'clusters': self.clusters, 'overall': self.overall, 'labelled_chunks': self.labelled_chunks}


def chunk_labels(recording: 'SimulatedRecording', chunk_indices: Sequence[int],
                 chunk_seconds: float = config.CHUNK_SECONDS) -> List[Optional[int]]:
    """True speaker of each chunk when exactly one speaker is active in it, else None."""
    labels = []
    for index in chunk_indices:
        active = recording.script.active_speakers(index * chunk_seconds, (index + 1) * chunk_seconds)
        labels.append(active[0] if len(active) == 1 else None)
    return labels


def cluster_purity(assignments: Sequence[int], labels: Sequence[Optional[int]], n_clusters: int) -> PurityReport:
    """Majority-speaker fraction per cluster over labelled chunks."""
    report = PurityReport()
    majority_total = 0
    for cluster in range(n_clusters):
        members = [label for a, label in zip(assignments, labels) if a == cluster and label is not None]
        if members:
            values, counts = np.unique(members, return_counts=True)
            best = int(np.argmax(counts))
            majority_total += int(counts[best])
            entry = {'cluster': cluster, 'labelled': len(members), 'majority_speaker': int(values[best]),
                     'purity': float(counts[best] / len(members))}
        else:
            entry = {'cluster': cluster, 'labelled': 0, 'majority_speaker': None, 'purity': None}
        report.clusters.append(entry)
    report.labelled_chunks = sum(1 for label in labels if label is not None)
    if report.labelled_chunks:
        report.overall = majority_total / report.labelled_chunks
    return report


def purity(inventory: SpeakerInventory, recording: 'SimulatedRecording') -> PurityReport:
    """Cluster purity over single-speaker chunks; empty for enrolled inventories."""
    provenance = inventory.provenance
    if not isinstance(provenance, ClusteredProvenance):
        return PurityReport()
    labels = chunk_labels(recording, provenance.chunk_indices, provenance.chunk_seconds)
    return cluster_purity(provenance.assignments, labels, inventory.size)


def speaker_references(recording: 'SimulatedRecording') -> Dict[int, Embedding]:
    """Pooled embedding of each speaker's clean source over its active frames."""
    references = {}
    for speaker, source in recording.clean_sources.items():
        try:
            references[speaker] = mean_pool(embed_frames(source))
        except ValueError:
            logger.debug(f"Speaker {speaker} is silent in this recording")
    return references


def nearest_speakers(inventory: SpeakerInventory, references: Dict[int, Embedding]) -> List[int]:
    """Nearest true speaker (by cosine) of every profile."""
    ids = sorted(references)
    matrix = np.stack([references[i].vector for i in ids])
    return [ids[int(np.argmax(matrix @ row))] for row in inventory.profiles]


def save_inventory(path: Union[str, Path], inventory: SpeakerInventory) -> Path:
    return write_embeddings(path, inventory.profiles, {'provenance': inventory.provenance.to_json()})


def load_inventory(path: Union[str, Path]) -> SpeakerInventory:
    matrix, sidecar = read_embeddings(path)
    info = sidecar.get('provenance', {})
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError(f"{path}: inventory contains a zero profile")
    if info.get('kind') == 'enrolled':
        provenance: Provenance = EnrolledProvenance(tuple(int(i) for i in info['speaker_ids']))
    else:
        provenance = ClusteredProvenance(
            sizes=tuple(int(s) for s in info.get('sizes', ())),
            inertia=float(info.get('inertia', 0.0)),
            chunk_indices=tuple(int(i) for i in info.get('chunk_indices', ())),
            assignments=tuple(int(a) for a in info.get('assignments', ())),
            seed=info.get('seed'),
            chunk_seconds=float(info.get('chunk_seconds', config.CHUNK_SECONDS)),
        )
    return SpeakerInventory(matrix / norms, provenance)
