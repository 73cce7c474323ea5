"""Speaker profile selection by frame-averaged softmax similarity."""
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.special import softmax

import config
from embedder import Embedding, EmbeddingSequence
from inventory import SpeakerInventory

logger = logging.getLogger(__name__)

PROFILE_CONDITIONS = ('selected', 'two_correct', 'one_correct', 'two_wrong')


@dataclass(frozen=True)
class SelectionScores:
    """Per-frame softmax weights over profiles and their average."""

    per_frame: np.ndarray
    averaged: np.ndarray
    used_frames: np.ndarray


@dataclass(frozen=True)
class SelectedProfiles:
    p1_index: int
    p2_index: int
    e_p1: Embedding
    e_p2: Embedding
    scores: Optional[SelectionScores] = None

    def __post_init__(self):
        if self.p1_index == self.p2_index:
            raise ValueError("The two selected profiles must differ")

    def swapped(self) -> 'SelectedProfiles':
        return SelectedProfiles(self.p2_index, self.p1_index, self.e_p2, self.e_p1, self.scores)


def score(mix_seq: EmbeddingSequence, inv: SpeakerInventory, strict: bool = False,
          scale: float = config.SELECTION_SCALE) -> SelectionScores:
    """
    Dot-product similarities per frame, softmax across profiles, then averaged.

    Similarities are multiplied by scale before the softmax. Embeddings are
    unit vectors, so without it every frame spreads its weight almost evenly.
    Silent frames are left out of the average unless strict is set.
    """
    if len(mix_seq) == 0:
        raise ValueError("Cannot score an empty embedding sequence")
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    used = np.ones(len(mix_seq), dtype=bool) if strict else ~mix_seq.silent
    if not np.any(~mix_seq.silent):
        raise ValueError("no speech content: every frame of the segment is silent")
    similarities = mix_seq.frames @ inv.profiles.T
    per_frame = softmax(scale * similarities, axis=1)
    averaged = per_frame[used].mean(axis=0)
    return SelectionScores(per_frame, averaged, used)


def select_top2(scores: SelectionScores, inv: SpeakerInventory) -> SelectedProfiles:
    """Two highest averaged scores; ties go to the lower index."""
    order = np.argsort(-scores.averaged, kind='stable')
    p1, p2 = int(order[0]), int(order[1])
    return SelectedProfiles(p1, p2, inv.profile(p1), inv.profile(p2), scores)


def profile_groups(inv: SpeakerInventory, first: int) -> np.ndarray:
    """
    Group label per profile, with first anchoring group 0.

    The profile least similar to first anchors group 1. Further profiles become
    anchors while their best similarity to every anchor stays below the midpoint
    between that pair's similarity and 1. Every profile joins its most similar
    anchor.
    """
    sims = inv.profiles @ inv.profiles.T
    anchors = [first, int(np.argmin(sims[first]))]
    limit = (1.0 + sims[first, anchors[1]]) / 2.0
    while len(anchors) < inv.size:
        closeness = sims[:, anchors].max(axis=1)
        closeness[anchors] = np.inf
        candidate = int(np.argmin(closeness))
        if closeness[candidate] >= limit:
            break
        anchors.append(candidate)
    return np.argmax(sims[:, anchors], axis=1)


def select_distinct(scores: SelectionScores, inv: SpeakerInventory) -> SelectedProfiles:
    """
    Best-scoring profile, then the best-scoring profile of another group.

    Profiles grouped with the first one are skipped, so two centroids of one
    voice are never paired. With two profiles this is select_top2.
    """
    order = np.argsort(-scores.averaged, kind='stable')
    p1 = int(order[0])
    groups = profile_groups(inv, p1)
    others = [int(row) for row in order[1:] if groups[row] != groups[p1]]
    p2 = others[0] if others else int(order[1])
    if p2 != int(order[1]):
        logger.debug(f"Skipped profiles grouped with {p1}; second profile is {p2}")
    return SelectedProfiles(p1, p2, inv.profile(p1), inv.profile(p2), scores)


def select_profiles(scores: SelectionScores, inv: SpeakerInventory) -> SelectedProfiles:
    """Top-2 for enrolled inventories, distinct groups for clustered ones."""
    if inv.speaker_ids is not None:
        return select_top2(scores, inv)
    return select_distinct(scores, inv)


def forced_profiles(inv: SpeakerInventory, p1: int, p2: int,
                    scores: Optional[SelectionScores] = None) -> SelectedProfiles:
    """Profiles chosen by the caller instead of by score."""
    for index in (p1, p2):
        if not 0 <= index < inv.size:
            raise ValueError(f"Profile index {index} outside inventory of size {inv.size}")
    return SelectedProfiles(int(p1), int(p2), inv.profile(p1), inv.profile(p2), scores)


def top_k(scores: SelectionScores, k: int = 5) -> List[Dict[str, Any]]:
    order = np.argsort(-scores.averaged, kind='stable')[:k]
    return [{'index': int(i), 'weight': round(float(scores.averaged[i]), 6)} for i in order]


def _best_rows(candidates: Sequence[int], scores: SelectionScores, count: int) -> List[int]:
    ranked = sorted(candidates, key=lambda row: (-scores.averaged[row], row))
    return ranked[:count]


def _random_rows(candidates: Sequence[int], count: int, seed: int) -> List[int]:
    rng = np.random.default_rng(config.derive_seed(seed, 'wrong-profiles'))
    return [int(row) for row in rng.choice(sorted(candidates), size=count, replace=False)]


def profiles_for_condition(condition: str, inv: SpeakerInventory, scores: SelectionScores,
                           segment_speakers: Sequence[int],
                           recording_speakers: Sequence[int], seed: int = 0) -> SelectedProfiles:
    """
    Profiles for one of the evaluation conditions.

    selected uses select_profiles. two_correct forces the segment's true
    speakers, one_correct pairs the first true speaker with a random profile of
    a speaker absent from the recording, and two_wrong draws two absent
    speakers. Random draws are seeded by seed. Forced conditions need an
    enrolled inventory.
    """
    if condition not in PROFILE_CONDITIONS:
        raise ValueError(f"Unknown profile condition '{condition}'")
    if condition == 'selected':
        return select_profiles(scores, inv)
    ids = inv.speaker_ids
    if ids is None:
        raise ValueError(f"Profile condition '{condition}' needs an enrolled inventory")
    row_of = {speaker: row for row, speaker in enumerate(ids)}
    present = set(recording_speakers)
    irrelevant = [row for row, speaker in enumerate(ids) if speaker not in present]
    correct = [row_of[s] for s in segment_speakers if s in row_of]

    if condition == 'two_correct':
        rows = correct[:2]
        if len(rows) < 2:
            others = [r for r in range(inv.size) if r not in rows and ids[r] in present]
            rows += _best_rows(others or [r for r in range(inv.size) if r not in rows], scores, 2 - len(rows))
    elif condition == 'one_correct':
        if not irrelevant:
            raise ValueError("Profile condition 'one_correct' needs at least one irrelevant profile")
        first = correct[:1] or _best_rows([r for r in range(inv.size) if ids[r] in present], scores, 1)
        if not first:
            raise ValueError("Profile condition 'one_correct' needs a profile of a recording speaker")
        rows = first + _random_rows(irrelevant, 1, seed)
    else:
        if len(irrelevant) < 2:
            raise ValueError("Profile condition 'two_wrong' needs at least two irrelevant profiles")
        rows = _random_rows(irrelevant, 2, seed)
    return forced_profiles(inv, rows[0], rows[1], scores)
