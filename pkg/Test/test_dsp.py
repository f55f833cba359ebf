"""
Test cases for signal processing (utils/dsp.py).

Tests:
- WAV read / write, sample-rate and channel checks
- STFT frame counts and stft/istft reconstruction
- Power-law compression and complex ratio masks
- Mel spectrogram shape and Nyquist check, tone tracking, amplitude scaling
"""

import os

import librosa
import numpy as np
import pytest
import soundfile as sf
import torch

from models.config import FrameParams, MelParams
from models.data_models import ComplexRatioMask, ComplexSpectrogram, Waveform
from utils.dsp import (
    apply_crm,
    istft,
    istft_tensor,
    mel_spectrogram,
    num_frames,
    power_law_compress,
    read_wav,
    stft,
    stft_tensor,
    write_wav,
)
from utils.errors import ConfigError, DataError


def _snr_db(ref: np.ndarray, est: np.ndarray) -> float:
    return 10 * np.log10(np.sum(ref ** 2) / np.sum((ref - est) ** 2))


class TestWavIO:
    """Tests for WAV file reading and writing."""

    def test_write_read(self, temp_dir, sine):
        path = os.path.join(temp_dir, "a.wav")
        write_wav(sine, path)
        back = read_wav(path)
        assert len(back) == len(sine)
        # 16-bit quantization
        assert np.max(np.abs(back.samples - sine.samples)) < 1e-4

    def test_missing_file(self, temp_dir):
        with pytest.raises(FileNotFoundError):
            read_wav(os.path.join(temp_dir, "nope.wav"))

    def test_foreign_rate_rejected(self, temp_dir):
        path = os.path.join(temp_dir, "a.wav")
        sf.write(path, np.zeros(8000), 8000, subtype="PCM_16")
        with pytest.raises(DataError, match="8000"):
            read_wav(path)

    def test_foreign_rate_resampled(self, temp_dir):
        path = os.path.join(temp_dir, "a.wav")
        sf.write(path, np.zeros(8000), 8000, subtype="PCM_16")
        w = read_wav(path, resample=True)
        assert w.sample_rate_hz == 16000
        assert len(w) == 16000

    def test_stereo_rejected(self, temp_dir):
        path = os.path.join(temp_dir, "a.wav")
        sf.write(path, np.zeros((1600, 2)), 16000, subtype="PCM_16")
        with pytest.raises(DataError, match="channels"):
            read_wav(path)


class TestStft:
    """Tests for the forward and inverse STFT."""

    @pytest.mark.parametrize("center", [True, False])
    def test_frame_count(self, center):
        fp = FrameParams(fft_size=256, hop=64, center=center)
        x = torch.randn(3, 4000, dtype=torch.float64)
        assert stft_tensor(x, fp).shape == (3, num_frames(4000, fp), 129)

    def test_reconstruction_snr(self, rng):
        """Round trip exceeds 60 dB on 50 random signals."""
        fp = FrameParams(fft_size=256, hop=64)
        for _ in range(50):
            n = int(rng.integers(1000, 6000))
            w = Waveform(rng.uniform(-1, 1, n))
            back = istft(stft(w, fp))
            assert len(back) == n
            assert _snr_db(w.samples, back.samples) >= 60.0

    def test_reconstruction_default_frame(self, sine):
        back = istft(stft(sine, FrameParams()))
        assert _snr_db(sine.samples, back.samples) >= 60.0

    def test_rect_window(self, rng):
        fp = FrameParams(fft_size=256, hop=128, window="rect")
        w = Waveform(rng.standard_normal(3000))
        assert _snr_db(w.samples, istft(stft(w, fp)).samples) >= 60.0

    def test_empty_waveform(self):
        with pytest.raises(DataError, match="empty"):
            stft(Waveform(np.zeros(0)), FrameParams())

    def test_shorter_than_frame(self):
        with pytest.raises(DataError, match="fewer than fft_size"):
            stft(Waveform(np.zeros(100)), FrameParams(fft_size=256, hop=64))

    def test_istft_without_frame_params(self, sine):
        s = stft(sine, FrameParams())
        with pytest.raises(ValueError):
            istft(ComplexSpectrogram(s.bins, None, s.length))

    def test_istft_inconsistent_frames(self, sine):
        """Frame count must match length and hop."""
        s = stft(sine, FrameParams())
        with pytest.raises(ValueError, match="frames"):
            istft(ComplexSpectrogram(s.bins[:-3], s.frame_params, s.length))

    def test_istft_tensor_gradient(self):
        fp = FrameParams(fft_size=256, hop=64)
        x = torch.randn(2, 2000, dtype=torch.float64, requires_grad=True)
        y = istft_tensor(stft_tensor(x, fp), fp, 2000)
        y.sum().backward()
        assert torch.isfinite(x.grad).all()


class TestCompressionAndMasks:
    """Tests for power-law compression and apply_crm."""

    def _spec(self, rng):
        bins = torch.complex(torch.as_tensor(rng.standard_normal((5, 9))),
                             torch.as_tensor(rng.standard_normal((5, 9))))
        return ComplexSpectrogram(bins, FrameParams(fft_size=16, hop=4), 16)

    def test_compress_keeps_phase(self, rng):
        s = self._spec(rng)
        c = power_law_compress(s, 0.3)
        assert torch.allclose(torch.angle(c.bins), torch.angle(s.bins), atol=1e-9)
        mag = s.bins.abs()
        assert torch.allclose(c.bins.abs(), mag * (mag ** 2 + 1e-8) ** -0.35, atol=1e-9)
        assert torch.allclose(c.bins.abs(), mag ** 0.3, rtol=1e-4)

    def test_compress_zero_is_zero(self):
        s = ComplexSpectrogram(torch.zeros(2, 3, dtype=torch.complex128), None, 0)
        assert torch.count_nonzero(power_law_compress(s, 0.3).bins) == 0

    def test_compress_p_range(self, rng):
        with pytest.raises(ValueError):
            power_law_compress(self._spec(rng), 1.5)

    def test_crm_identity(self, rng):
        s = self._spec(rng)
        out = apply_crm(s, ComplexRatioMask(torch.ones_like(s.bins)))
        assert torch.max(torch.abs(out.bins - s.bins)) <= 1e-12

    def test_crm_zero(self, rng):
        s = self._spec(rng)
        out = apply_crm(s, ComplexRatioMask(torch.zeros_like(s.bins)))
        assert torch.max(torch.abs(out.bins)) <= 1e-12

    def test_crm_complex_product(self, rng):
        """(a + jb)(c + jd) = (ac - bd) + j(ad + bc) per bin."""
        s = self._spec(rng)
        m = self._spec(rng).bins
        out = apply_crm(s, ComplexRatioMask(m)).bins
        a, b, c, d = s.bins.real, s.bins.imag, m.real, m.imag
        assert torch.max(torch.abs(out.real - (a * c - b * d))) <= 1e-12
        assert torch.max(torch.abs(out.imag - (a * d + b * c))) <= 1e-12

    def test_crm_shape_mismatch(self, rng):
        s = self._spec(rng)
        with pytest.raises(ValueError):
            apply_crm(s, ComplexRatioMask(torch.ones(5, 8, dtype=torch.complex128)))


class TestMel:
    """Tests for mel analysis."""

    def test_shape_matches_stft_frames(self, sine):
        fp = FrameParams(fft_size=256, hop=64)
        mel = mel_spectrogram(sine, MelParams(n_mels=40), fp)
        assert mel.shape == (num_frames(len(sine), fp), 40)

    def test_log_floor(self):
        mel = mel_spectrogram(Waveform(np.zeros(2000)), MelParams(n_mels=20), FrameParams(fft_size=256, hop=64))
        assert torch.allclose(mel.frames, torch.full_like(mel.frames, np.log(1e-5)))

    def test_linear_scale(self, sine):
        mel = mel_spectrogram(sine, MelParams(n_mels=20), FrameParams(fft_size=256, hop=64), log_scale=False)
        assert float(mel.frames.min()) >= 0.0

    def test_fmax_above_nyquist(self, sine):
        with pytest.raises(ConfigError):
            mel_spectrogram(sine, MelParams(fmax=12000.0))

    def test_tone_peak_tracks_frequency(self):
        """The loudest mel band follows a pure tone up the spectrum."""
        params = MelParams(n_mels=40)
        centers = librosa.mel_frequencies(n_mels=params.n_mels + 2, fmin=params.fmin, fmax=params.fmax)[1:-1]
        t = np.arange(16000) / 16000.0
        peaks = []
        for freq in (250.0, 500.0, 1000.0, 2000.0, 4000.0, 6000.0):
            mel = mel_spectrogram(Waveform(0.5 * np.sin(2 * np.pi * freq * t)), params, log_scale=False)
            peak = int(torch.argmax(mel.frames.mean(dim=0)))
            assert abs(peak - int(np.argmin(np.abs(centers - freq)))) <= 1, freq
            peaks.append(peak)
        assert peaks == sorted(set(peaks))

    def test_energy_scales_with_amplitude(self, sine):
        fp = FrameParams(fft_size=256, hop=64)
        params = MelParams(n_mels=20)
        energies = []
        for gain in (0.1, 0.2, 0.4, 0.8):
            scaled = Waveform(gain * sine.samples)
            energies.append(float(mel_spectrogram(scaled, params, fp, log_scale=False).frames.sum()))
        assert all(a < b for a, b in zip(energies, energies[1:]))
        assert np.isclose(energies[1], 2 * energies[0], rtol=1e-6)

        logs = [float(mel_spectrogram(Waveform(g * sine.samples), params, fp).frames.mean())
                for g in (0.1, 0.2, 0.4, 0.8)]
        assert all(a < b for a, b in zip(logs, logs[1:]))
