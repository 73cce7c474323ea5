"""Tests for profile scoring and selection."""
import numpy as np
import pytest

import config
from embedder import EmbeddingSequence, embed_frames
from inventory import ClusteredProvenance, EnrolledProvenance, SpeakerInventory, build_inventory_from_enrollments
from selector import (
    SelectedProfiles,
    SelectionScores,
    forced_profiles,
    profile_groups,
    profiles_for_condition,
    score,
    select_distinct,
    select_profiles,
    select_top2,
    top_k,
)
from simulator import generate_enrollments, generate_segment, sample_pattern


def random_units(rng, rows, dim):
    x = rng.standard_normal((rows, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def make_sequence(frames, silent=None):
    frames = np.array(frames, dtype=float)
    if silent is None:
        silent = np.zeros(frames.shape[0], dtype=bool)
    frames[silent] = 0.0
    return EmbeddingSequence(frames, silent)


def oracle_scores(frames, silent, profiles, scale=config.SELECTION_SCALE):
    """Softmax average in extended precision."""
    sims = np.asarray(frames, dtype=np.longdouble) @ np.asarray(profiles, dtype=np.longdouble).T
    sims = sims * np.longdouble(scale)
    sims = sims[~silent]
    e = np.exp(sims - sims.max(axis=1, keepdims=True))
    weights = e / e.sum(axis=1, keepdims=True)
    return weights.mean(axis=0)


class TestScore:
    """Tests for frame-averaged softmax scores."""

    @pytest.mark.parametrize('case', range(1000))
    def test_matches_extended_precision_oracle(self, case):
        """Top-2 indices match exactly and weights within 1e-12."""
        rng = np.random.default_rng(case)
        t = int(rng.integers(1, 51))
        m = int(rng.integers(2, 17))
        frames = random_units(rng, t, 8)
        silent = rng.random(t) < 0.2
        silent[int(rng.integers(t))] = False
        seq = make_sequence(frames, silent)
        inv = SpeakerInventory(random_units(rng, m, 8), ClusteredProvenance((1,) * m, 0.0))

        scores = score(seq, inv)
        chosen = select_top2(scores, inv)
        expected = oracle_scores(seq.frames, silent, inv.profiles)
        order = np.argsort(-expected.astype(np.float64), kind='stable')
        assert (chosen.p1_index, chosen.p2_index) == (int(order[0]), int(order[1]))
        np.testing.assert_allclose(scores.averaged, expected.astype(np.float64), rtol=0, atol=1e-12)

    def test_hand_computed_weights(self):
        """One frame [1, 0] against profiles e1 and e2 gives softmax(1, 0) without scaling."""
        inv = SpeakerInventory(np.eye(2), ClusteredProvenance((1, 1), 0.0))
        scores = score(make_sequence([[1.0, 0.0]]), inv, scale=1.0)
        np.testing.assert_allclose(scores.averaged, [0.7310585786, 0.2689414214], atol=1e-9)

    def test_scale_sharpens_weights(self):
        """The default scale moves weight towards the most similar profile."""
        inv = SpeakerInventory(np.eye(2), ClusteredProvenance((1, 1), 0.0))
        seq = make_sequence([[1.0, 0.0]])
        assert score(seq, inv).averaged[0] > score(seq, inv, scale=1.0).averaged[0] > 0.5

    def test_scale_must_be_positive(self):
        """A zero or negative scale is refused."""
        inv = SpeakerInventory(np.eye(2), ClusteredProvenance((1, 1), 0.0))
        with pytest.raises(ValueError):
            score(make_sequence([[1.0, 0.0]]), inv, scale=0.0)

    def test_all_silent(self):
        """A segment without voiced frames cannot be scored."""
        seq = make_sequence(np.zeros((5, 4)), np.ones(5, dtype=bool))
        inv = SpeakerInventory(np.eye(3, 4), ClusteredProvenance((1, 1, 1), 0.0))
        with pytest.raises(ValueError, match='no speech content'):
            score(seq, inv)

    def test_strict_mode_counts_silent_frames(self):
        """Strict averaging adds uniform weights for silent frames."""
        frames = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        seq = make_sequence(frames, np.array([False, True]))
        inv = SpeakerInventory(np.eye(3), ClusteredProvenance((1, 1, 1), 0.0))
        relaxed = score(seq, inv)
        strict = score(seq, inv, strict=True)
        np.testing.assert_allclose(strict.averaged, (relaxed.averaged + 1.0 / 3.0) / 2.0)
        assert relaxed.used_frames.sum() == 1
        assert strict.used_frames.sum() == 2

    def test_weights_sum_to_one(self, rng):
        """Averaged weights form a distribution over profiles."""
        seq = make_sequence(random_units(rng, 10, 6))
        inv = SpeakerInventory(random_units(rng, 5, 6), ClusteredProvenance((1,) * 5, 0.0))
        assert score(seq, inv).averaged.sum() == pytest.approx(1.0)


class TestSelectTop2:
    """Tests for top-2 selection."""

    def test_ties_go_to_lower_index(self):
        """Equal scores keep the lower profile index first."""
        profiles = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
        inv = SpeakerInventory(profiles, ClusteredProvenance((1, 1, 1), 0.0))
        chosen = select_top2(score(make_sequence([[1.0, 0.0]]), inv), inv)
        assert (chosen.p1_index, chosen.p2_index) == (1, 2)

    def test_monotone_transform_keeps_selection(self, rng):
        """Any strictly increasing map of the averaged scores selects the same pair."""
        inv = SpeakerInventory(random_units(rng, 7, 6), ClusteredProvenance((1,) * 7, 0.0))
        scores = score(make_sequence(random_units(rng, 20, 6)), inv)
        chosen = select_top2(scores, inv)
        for transform in (np.exp, np.sqrt, lambda x: 3.0 * x - 1.0, lambda x: x ** 3):
            moved = SelectionScores(scores.per_frame, transform(scores.averaged), scores.used_frames)
            again = select_top2(moved, inv)
            assert (again.p1_index, again.p2_index) == (chosen.p1_index, chosen.p2_index)

    def test_row_permutation(self, rng):
        """Permuting inventory rows permutes scores and selected indices alike."""
        inv = SpeakerInventory(random_units(rng, 9, 6), ClusteredProvenance((1,) * 9, 0.0))
        seq = make_sequence(random_units(rng, 15, 6))
        perm = rng.permutation(9)
        shuffled = SpeakerInventory(inv.profiles[perm], ClusteredProvenance((1,) * 9, 0.0))
        scores, moved = score(seq, inv), score(seq, shuffled)
        np.testing.assert_allclose(moved.averaged, scores.averaged[perm], atol=1e-12)
        chosen, again = select_top2(scores, inv), select_top2(moved, shuffled)
        assert (perm[again.p1_index], perm[again.p2_index]) == (chosen.p1_index, chosen.p2_index)

    def test_profiles_must_differ(self):
        """Both selected profiles cannot be the same row."""
        inv = SpeakerInventory(np.eye(2), ClusteredProvenance((1, 1), 0.0))
        with pytest.raises(ValueError):
            SelectedProfiles(0, 0, inv.profile(0), inv.profile(0))

    def test_swapped(self):
        """Swapping exchanges both index and embedding."""
        inv = SpeakerInventory(np.eye(3), ClusteredProvenance((1, 1, 1), 0.0))
        chosen = forced_profiles(inv, 0, 2).swapped()
        assert (chosen.p1_index, chosen.p2_index) == (2, 0)
        np.testing.assert_array_equal(chosen.e_p1.vector, np.eye(3)[2])

    def test_forced_index_range(self):
        """Forced profiles must exist in the inventory."""
        inv = SpeakerInventory(np.eye(3), ClusteredProvenance((1, 1, 1), 0.0))
        with pytest.raises(ValueError):
            forced_profiles(inv, 0, 3)

    def test_top_k(self, rng):
        """Diagnostics list the best profiles in order."""
        inv = SpeakerInventory(random_units(rng, 8, 6), ClusteredProvenance((1,) * 8, 0.0))
        scores = score(make_sequence(random_units(rng, 12, 6)), inv)
        best = top_k(scores)
        assert len(best) == 5
        weights = [entry['weight'] for entry in best]
        assert weights == sorted(weights, reverse=True)
        assert best[0]['index'] == select_top2(scores, inv).p1_index


class TestProfileConditions:
    """Tests for forced profile conditions on enrolled inventories."""

    @pytest.fixture
    def enrolled(self):
        return SpeakerInventory(np.eye(4, 8), EnrolledProvenance((0, 1, 2, 3)))

    @pytest.fixture
    def scores(self, enrolled):
        frames = np.array([[0.1, 0.2, 0.3, 0.9, 0, 0, 0, 0]])
        return score(make_sequence(frames / np.linalg.norm(frames)), enrolled)

    def test_selected(self, enrolled, scores):
        """The selected condition is plain top-2."""
        chosen = profiles_for_condition('selected', enrolled, scores, (0, 1), (0, 1))
        assert (chosen.p1_index, chosen.p2_index) == (3, 2)

    def test_two_correct(self, enrolled, scores):
        """Both true speakers of the segment are forced."""
        chosen = profiles_for_condition('two_correct', enrolled, scores, (0, 1), (0, 1))
        assert (chosen.p1_index, chosen.p2_index) == (0, 1)

    def test_one_correct(self, enrolled, scores):
        """One true speaker is paired with a profile of an absent speaker."""
        chosen = profiles_for_condition('one_correct', enrolled, scores, (1,), (0, 1), seed=4)
        assert chosen.p1_index == 1
        assert chosen.p2_index in (2, 3)

    def test_one_correct_draws_any_absent_speaker(self, enrolled, scores):
        """The absent profile is drawn at random, not by score, and repeats for a seed."""
        drawn = {profiles_for_condition('one_correct', enrolled, scores, (1,), (0, 1), seed=s).p2_index
                 for s in range(50)}
        assert drawn == {2, 3}
        first = profiles_for_condition('one_correct', enrolled, scores, (1,), (0, 1), seed=9)
        again = profiles_for_condition('one_correct', enrolled, scores, (1,), (0, 1), seed=9)
        assert first.p2_index == again.p2_index

    def test_two_wrong(self, enrolled, scores):
        """Two absent speakers are used."""
        chosen = profiles_for_condition('two_wrong', enrolled, scores, (0, 1), (0, 1))
        assert {chosen.p1_index, chosen.p2_index} == {2, 3}

    def test_two_wrong_draws_among_absent_speakers(self):
        """With more absent speakers than needed, different seeds draw different pairs."""
        inv = SpeakerInventory(np.eye(6, 8), EnrolledProvenance((0, 1, 2, 3, 4, 5)))
        frames = np.array([[0.1, 0.2, 0.3, 0.9, 0.0, 0.0, 0, 0]])
        scores = score(make_sequence(frames / np.linalg.norm(frames)), inv)
        pairs = set()
        for seed in range(30):
            chosen = profiles_for_condition('two_wrong', inv, scores, (0, 1), (0, 1), seed=seed)
            assert {chosen.p1_index, chosen.p2_index} <= {2, 3, 4, 5}
            pairs.add(frozenset((chosen.p1_index, chosen.p2_index)))
        assert len(pairs) > 1

    def test_two_wrong_needs_two_absent(self, enrolled, scores):
        """Without two absent speakers the condition cannot be built."""
        with pytest.raises(ValueError):
            profiles_for_condition('two_wrong', enrolled, scores, (0, 1), (0, 1, 2))

    def test_clustered_inventory_refused(self, scores):
        """Forced conditions need speaker ids."""
        inv = SpeakerInventory(np.eye(4, 8), ClusteredProvenance((1,) * 4, 0.0))
        with pytest.raises(ValueError):
            profiles_for_condition('two_correct', inv, scores, (0, 1), (0, 1))

    def test_unknown_condition(self, enrolled, scores):
        """Unknown condition names are refused."""
        with pytest.raises(ValueError):
            profiles_for_condition('random', enrolled, scores, (0, 1), (0, 1))


def unit(vector):
    vector = np.asarray(vector, dtype=float)
    return vector / np.linalg.norm(vector)


def clustered(*rows):
    profiles = np.stack([unit(r) for r in rows])
    return SpeakerInventory(profiles, ClusteredProvenance((1,) * len(rows), 0.0))


def weighted_frames(*pairs):
    """Frames repeating each (vector, count) pair."""
    return make_sequence(np.vstack([np.tile(unit(v), (n, 1)) for v, n in pairs]))


class TestSelectDistinct:
    """Tests for selection that skips profiles of the first profile's voice."""

    def test_two_profiles_match_top2(self, rng):
        """With two profiles there is nothing to skip."""
        inv = SpeakerInventory(random_units(rng, 2, 5), ClusteredProvenance((1, 1), 0.0))
        scores = score(make_sequence(random_units(rng, 6, 5)), inv)
        a, b = select_distinct(scores, inv), select_top2(scores, inv)
        assert (a.p1_index, a.p2_index) == (b.p1_index, b.p2_index)

    def test_duplicate_profile_skipped(self):
        """A near copy of the best profile is passed over for the other voice."""
        inv = clustered([1, 0, 0], [1, 0.15, 0], [0, 1, 0])
        scores = score(weighted_frames(([1, 0, 0], 3), ([0, 1, 0], 1)), inv)
        assert select_top2(scores, inv).p2_index == 1
        chosen = select_distinct(scores, inv)
        assert (chosen.p1_index, chosen.p2_index) == (0, 2)

    def test_blend_profile_skipped(self):
        """A profile between two voices is not taken as a second voice."""
        inv = clustered([1, 0, 0], [1, 0.9, 0], [0, 1, 0])
        scores = score(weighted_frames(([1, 0, 0], 3), ([1, 0.9, 0], 2), ([0, 1, 0], 1)), inv)
        assert select_top2(scores, inv).p2_index == 1
        chosen = select_distinct(scores, inv)
        assert (chosen.p1_index, chosen.p2_index) == (0, 2)

    def test_third_voice_keeps_own_group(self):
        """Distinct voices each anchor a group; the best one outside the first group wins."""
        inv = clustered([1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 0.15, 0])
        groups = profile_groups(inv, 0)
        assert groups[3] == groups[0]
        assert len({groups[0], groups[1], groups[2]}) == 3
        scores = score(weighted_frames(([1, 0, 0], 5), ([0, 0, 1], 2), ([0, 1, 0], 1)), inv)
        assert select_top2(scores, inv).p2_index == 3
        chosen = select_distinct(scores, inv)
        assert (chosen.p1_index, chosen.p2_index) == (0, 2)

    def test_selected_condition_by_inventory_kind(self):
        """Clustered inventories skip duplicates; enrolled inventories keep plain top-2."""
        rows = np.stack([unit([1, 0, 0]), unit([1, 0.15, 0]), unit([0, 1, 0])])
        seq = weighted_frames(([1, 0, 0], 3), ([0, 1, 0], 1))
        enrolled = SpeakerInventory(rows, EnrolledProvenance((0, 1, 2)))
        chosen = select_profiles(score(seq, enrolled), enrolled)
        assert (chosen.p1_index, chosen.p2_index) == (0, 1)
        inv = SpeakerInventory(rows, ClusteredProvenance((1, 1, 1), 0.0))
        chosen = profiles_for_condition('selected', inv, score(seq, inv), (), ())
        assert (chosen.p1_index, chosen.p2_index) == (0, 2)


@pytest.mark.slow
class TestSelectionAccuracy:
    """Tests for selection on simulated segments."""

    def test_enrolled_pair_found(self):
        """With 8 enrolled speakers the true pair is picked in at least 90% of two-speaker segments."""
        speakers = list(range(8))
        enrollments = generate_enrollments(speakers, 9)
        inv = build_inventory_from_enrollments([enrollments[s] for s in speakers], speakers)
        rng = np.random.default_rng(77)
        hits = total = 0
        for trial in range(120):
            a, b = (int(s) for s in rng.choice(8, size=2, replace=False))
            segment = generate_segment(a, b, sample_pattern(rng), seed=trial)
            if segment.script.active_speakers(0.0, segment.duration) != sorted((a, b)):
                continue
            chosen = select_top2(score(embed_frames(segment.mixture), inv), inv)
            total += 1
            hits += {chosen.p1_index, chosen.p2_index} == {a, b}
        assert total >= 90
        assert hits / total >= 0.9
