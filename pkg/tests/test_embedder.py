"""Tests for frame embeddings, pooling and the EMB1 format."""
import numpy as np
import pytest

from audio import Waveform
from embedder import (
    EMBEDDING_DIM,
    FRAME_SAMPLES,
    Embedding,
    chunk_embeddings,
    embed_frames,
    frames_per_chunk,
    load_chunk_embeddings,
    mean_pool,
    read_embeddings,
    save_chunk_embeddings,
    write_embeddings,
)
from simulator import synth_speaker


class TestEmbedFrames:
    """Tests for per-frame embeddings."""

    def test_one_row_per_40ms_frame(self, voices):
        """Four seconds of speech give 100 unit-norm rows."""
        seq = embed_frames(voices[0])
        assert seq.frames.shape == (100, EMBEDDING_DIM)
        assert not np.any(seq.silent)
        np.testing.assert_allclose(np.linalg.norm(seq.frames, axis=1), 1.0, atol=1e-9)

    def test_silence_gives_zero_rows(self):
        """Silent frames are zero rows flagged as silent."""
        seq = embed_frames(Waveform.silence(16000))
        assert np.all(seq.silent)
        assert not np.any(seq.frames)

    def test_partial_silence(self, voices):
        """Only the silent half of a signal is flagged."""
        samples = np.concatenate([voices[1].samples[:16000], np.zeros(16000)])
        seq = embed_frames(Waveform(samples))
        assert not np.any(seq.silent[:25])
        assert np.all(seq.silent[25:])

    def test_signal_too_short(self):
        """Less than one frame of audio is refused."""
        with pytest.raises(ValueError, match='signal too short'):
            embed_frames(Waveform(np.ones(100)))

    def test_wrong_sample_rate(self):
        """Only 16 kHz audio is embedded."""
        with pytest.raises(ValueError):
            embed_frames(Waveform(np.ones(8000), sample_rate=8000))

    def test_shift_by_one_frame(self, voices):
        """Dropping the first 640 samples drops the first row and leaves the others unchanged."""
        seq = embed_frames(voices[1])
        shifted = embed_frames(Waveform(voices[1].samples[FRAME_SAMPLES:]))
        assert len(shifted) == len(seq) - 1
        np.testing.assert_allclose(shifted.frames, seq.frames[1:], atol=1e-9)
        np.testing.assert_array_equal(shifted.silent, seq.silent[1:])

    def test_deterministic(self, voices):
        """Embedding is a pure function of the samples."""
        np.testing.assert_array_equal(embed_frames(voices[2]).frames, embed_frames(voices[2]).frames)


class TestMeanPool:
    """Tests for pooled speaker embeddings."""

    def test_same_speaker_is_closer(self):
        """Two utterances of one voice are closer than utterances of two distant voices."""
        a = mean_pool(embed_frames(synth_speaker(0, 2.0, seed=1)))
        b = mean_pool(embed_frames(synth_speaker(0, 2.0, seed=2)))
        c = mean_pool(embed_frames(synth_speaker(20, 2.0, seed=1)))
        assert a.cosine(b) > a.cosine(c)

    def test_speaker_panel_separable(self):
        """Over 10 speakers and 10 chunks each, every same-speaker pair is closer than any cross-speaker pair."""
        speakers = range(10)
        matrices = [chunk_embeddings(synth_speaker(s, 12.0, seed=40 + s)).matrix() for s in speakers]
        assert all(m.shape[0] == 10 for m in matrices)
        labels = np.repeat(np.arange(10), 10)
        sims = np.vstack(matrices) @ np.vstack(matrices).T
        same = labels[:, None] == labels[None, :]
        off_diagonal = ~np.eye(labels.size, dtype=bool)
        assert sims[same & off_diagonal].min() > sims[~same].max()

    def test_same_speaker_chunks_agree(self, voices):
        """Chunks of one voice have pooled cosine of at least 0.9."""
        for speaker in (0, 3):
            matrix = chunk_embeddings(voices[speaker]).matrix()
            assert (matrix @ matrix.T).min() >= 0.9

    def test_unit_norm(self, voices):
        """Pooled embeddings are unit vectors."""
        assert np.linalg.norm(mean_pool(embed_frames(voices[3])).vector) == pytest.approx(1.0)

    def test_all_silent(self):
        """Pooling silence has no speech content."""
        with pytest.raises(ValueError, match='no speech content'):
            mean_pool(embed_frames(Waveform.silence(3200)))

    def test_embedding_requires_unit_norm(self):
        """Non-unit vectors are not embeddings."""
        with pytest.raises(ValueError):
            Embedding(np.full(EMBEDDING_DIM, 0.5))


class TestChunkEmbeddings:
    """Tests for chunk-level embeddings."""

    def test_chunk_count(self, voices):
        """1.2 s chunks hold 30 frames; a 4 s signal gives 3 full chunks."""
        assert frames_per_chunk() == 30
        chunks = chunk_embeddings(voices[0])
        assert chunks.indices == [0, 1, 2]
        assert chunks.matrix().shape == (3, EMBEDDING_DIM)

    def test_silent_chunk_listed_separately(self, voices):
        """A silent chunk is left out of the items and listed by index."""
        samples = np.concatenate([voices[0].samples[:19200], np.zeros(19200), voices[0].samples[:19200]])
        chunks = chunk_embeddings(Waveform(samples))
        assert chunks.indices == [0, 2]
        assert chunks.silent_indices == [1]

    def test_shorter_than_chunk(self):
        """Signals shorter than one chunk are refused."""
        with pytest.raises(ValueError):
            chunk_embeddings(Waveform(np.ones(16000) * 0.1))


class TestEmbeddingFiles:
    """Tests for the EMB1 binary format."""

    def test_round_trip_within_float32(self, tmp_path, rng):
        """Matrices survive the file up to float32 precision, with their sidecar."""
        matrix = rng.standard_normal((5, EMBEDDING_DIM))
        write_embeddings(tmp_path / 'x.emb', matrix, {'note': 'test'})
        loaded, sidecar = read_embeddings(tmp_path / 'x.emb')
        np.testing.assert_allclose(loaded, matrix, rtol=1e-6, atol=1e-6)
        assert sidecar == {'note': 'test'}

    def test_header_layout(self, tmp_path):
        """The file starts with the magic, row count and dimension."""
        write_embeddings(tmp_path / 'x.emb', np.zeros((2, 3)))
        data = (tmp_path / 'x.emb').read_bytes()
        assert data[:4] == b'EMB1'
        assert int.from_bytes(data[4:8], 'little') == 2
        assert int.from_bytes(data[8:12], 'little') == 3
        assert len(data) == 12 + 2 * 3 * 4

    def test_bad_magic(self, tmp_path):
        """Files with another magic are refused."""
        write_embeddings(tmp_path / 'x.emb', np.zeros((1, 4)), magic=b'NOPE')
        with pytest.raises(ValueError, match='bad magic'):
            read_embeddings(tmp_path / 'x.emb')

    def test_truncated_file(self, tmp_path):
        """A size mismatch is refused."""
        path = tmp_path / 'x.emb'
        write_embeddings(path, np.zeros((2, 4)))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ValueError):
            read_embeddings(path)

    def test_chunk_embeddings_reload(self, tmp_path, voices):
        """Saved chunk embeddings reload with their indices."""
        chunks = chunk_embeddings(voices[1])
        save_chunk_embeddings(tmp_path / 'c.emb', chunks)
        loaded = load_chunk_embeddings(tmp_path / 'c.emb')
        assert loaded.indices == chunks.indices
        assert loaded.chunk_seconds == pytest.approx(1.2)
        np.testing.assert_allclose(loaded.matrix(), chunks.matrix(), atol=1e-6)
