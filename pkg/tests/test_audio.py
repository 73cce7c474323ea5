"""Tests for the audio core module."""
import numpy as np
import pytest
import soundfile as sf

from audio import (
    Mask,
    Spectrogram,
    StftConfig,
    Waveform,
    apply_mask,
    crop,
    istft,
    padded_stft,
    read_wav,
    reliable_span,
    spectrogram_energy,
    stft,
    write_wav,
)


class TestWaveform:
    """Tests for the Waveform type."""

    def test_rejects_non_finite_samples(self):
        """NaN samples are refused at construction."""
        with pytest.raises(ValueError):
            Waveform(np.array([0.0, np.nan, 0.1]))

    def test_rejects_multichannel(self):
        """Two-dimensional sample arrays are refused."""
        with pytest.raises(ValueError):
            Waveform(np.zeros((100, 2)))

    def test_samples_are_read_only(self):
        """Waveforms are immutable after construction."""
        w = Waveform(np.zeros(10))
        with pytest.raises(ValueError):
            w.samples[0] = 1.0

    def test_slice_and_duration(self):
        """Slicing in seconds maps onto sample indices."""
        w = Waveform(np.arange(16000, dtype=float))
        part = w.slice(0.25, 0.5)
        assert len(part) == 4000
        assert part.samples[0] == 4000
        assert w.duration == pytest.approx(1.0)


class TestStftConfig:
    """Tests for STFT configuration validation."""

    def test_defaults(self):
        c = StftConfig()
        assert c.fft_size == 512
        assert c.hop == 256
        assert c.n_bins == 257

    def test_rejects_non_power_of_two(self):
        with pytest.raises(ValueError):
            StftConfig(fft_size=500, hop=250)

    def test_rejects_hop_larger_than_fft(self):
        with pytest.raises(ValueError):
            StftConfig(fft_size=512, hop=1024)


class TestStft:
    """Tests for analysis and synthesis."""

    def test_zero_signal_gives_zero_spectrogram(self):
        """One second of silence gives an all-zero (61, 257) spectrogram."""
        s = stft(Waveform.silence(16000))
        assert s.shape == (61, 257)
        assert np.all(s.bins == 0)

    def test_too_short_signal(self):
        """A signal shorter than one frame is rejected."""
        with pytest.raises(ValueError, match="signal too short"):
            stft(Waveform(np.zeros(100)))

    def test_bin_centred_sine_peaks_at_its_bin(self):
        """A sine at a bin-centre frequency puts its energy at that bin and its Hann neighbours."""
        k = 20
        t = np.arange(16000) / 16000
        s = stft(Waveform(0.5 * np.sin(2 * np.pi * k * 16000 / 512 * t)))
        power = np.abs(s.bins) ** 2
        frame_energy = power.sum(axis=1)
        assert np.all(np.argmax(power, axis=1) == k)
        assert np.all(power[:, k - 1:k + 2].sum(axis=1) >= 0.99 * frame_energy)

    def test_impulse_at_frame_centre_is_flat(self):
        """An impulse at a frame centre gives a flat magnitude equal to the window peak."""
        x = np.zeros(4096)
        x[512 + 256] = 1.0
        s = stft(Waveform(x))
        np.testing.assert_allclose(np.abs(s.bins[2]), 1.0, atol=1e-12)

    def test_round_trip_interior(self):
        """istft(stft(x)) reproduces random signals away from the edges."""
        rng = np.random.default_rng(0)
        for _ in range(100):
            x = rng.standard_normal(64000) * 0.3
            y = istft(stft(Waveform(x)))
            start, stop = reliable_span(len(y))
            assert np.max(np.abs(y.samples[start:stop] - x[start:stop])) < 1e-6

    def test_output_length(self):
        """Synthesis length is (L - 1) * hop + fft_size."""
        s = stft(Waveform(np.random.default_rng(1).standard_normal(10000)))
        assert len(istft(s)) == (s.shape[0] - 1) * 256 + 512

    def test_zero_spectrogram_gives_zero_waveform(self):
        s = Spectrogram(np.zeros((10, 257), dtype=complex), StftConfig())
        assert np.all(istft(s).samples == 0)

    def test_istft_is_linear(self):
        """Scaling the spectrogram scales the waveform."""
        s = stft(Waveform(np.random.default_rng(2).standard_normal(8000)))
        np.testing.assert_allclose(istft(s.scaled(2.5)).samples, 2.5 * istft(s).samples, atol=1e-12)

    def test_padded_round_trip_is_exact_everywhere(self):
        """Padding makes every original sample reconstructable, edges included."""
        x = np.random.default_rng(3).standard_normal(12345) * 0.1
        s, offset = padded_stft(Waveform(x))
        y = crop(istft(s), offset, len(x))
        assert len(y) == len(x)
        assert np.max(np.abs(y.samples - x)) < 1e-9

    def test_energy_consistency(self):
        """Window-scaled spectrogram energy matches the signal energy within 1%."""
        x = np.random.default_rng(4).standard_normal(160000)
        w = Waveform(x)
        assert spectrogram_energy(stft(w)) == pytest.approx(w.energy, rel=0.01)


class TestApplyMask:
    """Tests for mask application."""

    @pytest.fixture
    def spectrogram(self):
        return stft(Waveform(np.random.default_rng(5).standard_normal(8000)))

    def test_ones_mask_is_identity(self, spectrogram):
        out = apply_mask(spectrogram, Mask(np.ones(spectrogram.shape)))
        np.testing.assert_array_equal(out.bins, spectrogram.bins)

    def test_zeros_mask_silences(self, spectrogram):
        out = apply_mask(spectrogram, Mask(np.zeros(spectrogram.shape)))
        assert np.all(out.bins == 0)

    def test_complementary_masks_add_up(self, spectrogram):
        """m and 1 - m split the spectrogram bin-wise."""
        m = np.random.default_rng(6).uniform(size=spectrogram.shape)
        total = apply_mask(spectrogram, Mask(m)).bins + apply_mask(spectrogram, Mask(1 - m)).bins
        np.testing.assert_allclose(total, spectrogram.bins, atol=1e-12)

    def test_shape_mismatch(self, spectrogram):
        with pytest.raises(ValueError):
            apply_mask(spectrogram, Mask(np.ones((3, 257))))

    def test_mask_range_enforced(self):
        with pytest.raises(ValueError):
            Mask(np.full((2, 257), 1.5))


class TestWavIO:
    """Tests for 16-bit WAV reading and writing."""

    def test_round_trip_quantisation(self, tmp_path):
        """Values survive a write/read within one PCM step."""
        x = np.random.default_rng(7).uniform(-0.9, 0.9, 1600)
        path = tmp_path / 'x.wav'
        write_wav(path, Waveform(x))
        y = read_wav(path)
        assert y.sample_rate == 16000
        assert np.max(np.abs(y.samples - x)) <= 1 / 32768

    def test_rejects_other_sample_rates(self, tmp_path):
        path = tmp_path / 'low.wav'
        sf.write(str(path), np.zeros(800, dtype=np.int16), 8000, subtype='PCM_16')
        with pytest.raises(ValueError, match="16000 Hz"):
            read_wav(path)

    def test_rejects_stereo(self, tmp_path):
        path = tmp_path / 'stereo.wav'
        sf.write(str(path), np.zeros((800, 2), dtype=np.int16), 16000, subtype='PCM_16')
        with pytest.raises(ValueError, match="mono"):
            read_wav(path)

    def test_clipping_on_write(self, tmp_path):
        path = tmp_path / 'loud.wav'
        write_wav(path, Waveform(np.array([2.0, -2.0, 0.0])))
        y = read_wav(path)
        assert y.samples[0] == pytest.approx(32767 / 32768)
        assert y.samples[1] == -1.0
