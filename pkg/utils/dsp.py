"""
Signal-processing substrate shared by every other module.

Waveform-level operations (stft, istft, mel_spectrogram, power_law_compress,
apply_crm) wrap batched, differentiable tensor-level forms (stft_tensor,
istft_tensor, mel_tensor, compress_bins, compressed_magnitude). Spectrogram
tensors are laid out (..., T, F).
"""

import functools
import logging
import os
from math import gcd
from typing import Optional

import librosa
import numpy as np
import soundfile as sf
import torch
import torch.nn.functional as F
from scipy.signal import resample_poly

from models.config import FrameParams, MelParams, SAMPLE_RATE_HZ
from models.data_models import (
    ComplexRatioMask,
    ComplexSpectrogram,
    MelSpectrogram,
    Waveform,
    atomic_write,
)
from utils.errors import DataError

logger = logging.getLogger(__name__)

# Added inside the magnitude before raising it to p - 1
MAG_EPS = 1e-8


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def read_wav(path: str, resample: bool = False) -> Waveform:
    """
    Read a mono WAV file.

    Args:
        path: File to read.
        resample: Convert other sample rates to 16 kHz instead of failing.

    Returns:
        Waveform at 16 kHz.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        DataError: For multi-channel audio, or a foreign sample rate without
            ``resample``.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Audio file not found: {path}")
    try:
        data, rate = sf.read(path, dtype="float64", always_2d=True)
    except RuntimeError as e:
        raise DataError(f"Cannot decode audio file '{path}': {e}")
    if data.shape[1] != 1:
        raise DataError(f"'{path}' has {data.shape[1]} channels; only mono audio is supported")
    samples = data[:, 0]
    if rate != SAMPLE_RATE_HZ:
        if not resample:
            raise DataError(
                f"'{path}' is sampled at {rate} Hz; expected {SAMPLE_RATE_HZ} Hz "
                "(pass --resample to convert)"
            )
        g = gcd(SAMPLE_RATE_HZ, rate)
        samples = resample_poly(samples, SAMPLE_RATE_HZ // g, rate // g)
        logger.info("[Resample] %s: %d Hz -> %d Hz", path, rate, SAMPLE_RATE_HZ)
    return Waveform(samples, SAMPLE_RATE_HZ)


def write_wav(w: Waveform, path: str) -> None:
    """Write ``w`` as 16-bit PCM (samples clipped to [-1, 1])."""
    data = np.clip(w.samples, -1.0, 1.0)
    atomic_write(
        path,
        lambda f: sf.write(f, data, w.sample_rate_hz, subtype="PCM_16", format="WAV"),
        binary=True,
    )


# ---------------------------------------------------------------------------
# Framing
# ---------------------------------------------------------------------------

def num_frames(n_samples: int, frame_params: FrameParams) -> int:
    """Number of STFT frames for a signal of ``n_samples``."""
    if frame_params.center:
        return 1 + n_samples // frame_params.hop
    return 1 + (n_samples - frame_params.fft_size) // frame_params.hop


@functools.lru_cache(maxsize=16)
def _window_np(kind: str, size: int) -> np.ndarray:
    if kind == "rect":
        return np.ones(size)
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(size) / size)


def _window(frame_params: FrameParams, like: torch.Tensor) -> torch.Tensor:
    dtype = like.real.dtype if like.is_complex() else like.dtype
    return torch.as_tensor(
        _window_np(frame_params.window, frame_params.fft_size), dtype=dtype, device=like.device
    )


def stft_tensor(x: torch.Tensor, frame_params: FrameParams) -> torch.Tensor:
    """
    Short-time Fourier transform of real signals shaped (..., n).

    Returns:
        Complex tensor (..., T, F), F = fft_size // 2 + 1.

    Raises:
        DataError: If the signal is empty or shorter than one frame.
        ConfigError: If the frame parameters are invalid.
    """
    frame_params.validate()
    n = x.shape[-1]
    if n == 0:
        raise DataError("cannot analyse an empty waveform")
    if n < frame_params.fft_size:
        raise DataError(f"waveform has {n} samples, fewer than fft_size={frame_params.fft_size}")
    lead = x.shape[:-1]
    spec = torch.stft(
        x.reshape(-1, n),
        n_fft=frame_params.fft_size,
        hop_length=frame_params.hop,
        window=_window(frame_params, x),
        center=frame_params.center,
        pad_mode="constant",
        return_complex=True,
    )
    return spec.transpose(-1, -2).reshape(*lead, spec.shape[-1], spec.shape[-2])


def istft_tensor(bins: torch.Tensor, frame_params: FrameParams, length: int) -> torch.Tensor:
    """
    Weighted overlap-add inverse of ``stft_tensor``.

    Samples whose squared-window envelope vanishes (possible only at the
    edges of uncentred analysis) are returned as 0.

    Returns:
        Real tensor (..., length).
    """
    fft_size, hop = frame_params.fft_size, frame_params.hop
    lead = bins.shape[:-2]
    n_frames = bins.shape[-2]
    frames = torch.fft.irfft(bins.reshape(-1, n_frames, bins.shape[-1]), n=fft_size, dim=-1)
    window = _window(frame_params, frames)
    frames = frames * window
    padded_len = fft_size + hop * (n_frames - 1)
    signal = F.fold(
        frames.transpose(1, 2).contiguous(),
        output_size=(1, padded_len),
        kernel_size=(1, fft_size),
        stride=(1, hop),
    ).reshape(-1, padded_len)
    envelope = F.fold(
        (window ** 2).reshape(1, fft_size, 1).expand(1, fft_size, n_frames).contiguous(),
        output_size=(1, padded_len),
        kernel_size=(1, fft_size),
        stride=(1, hop),
    ).reshape(padded_len)
    signal = torch.where(envelope > 1e-10, signal / envelope.clamp_min(1e-10), torch.zeros_like(signal))
    start = fft_size // 2 if frame_params.center else 0
    signal = signal[:, start:start + length]
    if signal.shape[-1] < length:
        signal = F.pad(signal, (0, length - signal.shape[-1]))
    return signal.reshape(*lead, length)


def stft(w: Waveform, frame_params: FrameParams) -> ComplexSpectrogram:
    """STFT of a waveform, computed in double precision."""
    bins = stft_tensor(w.to_tensor(torch.float64), frame_params)
    return ComplexSpectrogram(bins=bins, frame_params=frame_params, length=len(w))


def istft(s: ComplexSpectrogram) -> Waveform:
    """
    Inverse STFT using the analysis metadata carried by ``s``.

    Raises:
        ValueError: If frame parameters are missing or inconsistent with the
            bins (wrong bin count, or a frame count that does not match the
            recorded length under the recorded hop).
    """
    fp = s.frame_params
    if fp is None:
        raise ValueError("spectrogram carries no frame parameters; cannot invert")
    fp.validate()
    if s.bins.shape[-1] != fp.n_bins:
        raise ValueError(
            f"spectrogram has {s.bins.shape[-1]} bins but fft_size={fp.fft_size} implies {fp.n_bins}"
        )
    expected = num_frames(s.length, fp)
    if s.bins.shape[-2] != expected:
        raise ValueError(
            f"spectrogram has {s.bins.shape[-2]} frames but hop={fp.hop} and "
            f"length={s.length} imply {expected}"
        )
    samples = istft_tensor(s.bins.detach().to(torch.complex128), fp, s.length)
    return Waveform(samples.reshape(-1).numpy(), SAMPLE_RATE_HZ)


# ---------------------------------------------------------------------------
# Compression and masking
# ---------------------------------------------------------------------------

def compress_bins(bins: torch.Tensor, p: float) -> torch.Tensor:
    """|s|^p * exp(j*phase(s)) per bin; exactly 0 where s == 0."""
    if p <= 0:
        raise ValueError(f"compression factor must be positive, got {p}")
    power = bins.real ** 2 + bins.imag ** 2
    return bins * (power + MAG_EPS) ** ((p - 1.0) / 2.0)


def compressed_magnitude(bins: torch.Tensor, p: float) -> torch.Tensor:
    """|s|^p per bin, with a zero gradient at s == 0."""
    if p <= 0:
        raise ValueError(f"compression factor must be positive, got {p}")
    power = bins.real ** 2 + bins.imag ** 2
    return bins.abs() * (power + MAG_EPS) ** ((p - 1.0) / 2.0)


def power_law_compress(s: ComplexSpectrogram, p: float) -> ComplexSpectrogram:
    """
    Power-law compress a spectrogram's magnitudes, keeping phase.

    Raises:
        ValueError: If ``p`` is not in (0, 1].
    """
    if not 0 < p <= 1:
        raise ValueError(f"p must be in (0, 1], got {p}")
    return ComplexSpectrogram(compress_bins(s.bins, p), s.frame_params, s.length)


def apply_crm(s: ComplexSpectrogram, m: ComplexRatioMask) -> ComplexSpectrogram:
    """
    Apply a complex ratio mask by per-bin complex multiplication.

    Raises:
        ValueError: If the shapes differ.
    """
    if tuple(s.bins.shape) != tuple(m.mask.shape):
        raise ValueError(f"mask shape {tuple(m.mask.shape)} does not match spectrogram {tuple(s.bins.shape)}")
    return ComplexSpectrogram(s.bins * m.mask, s.frame_params, s.length)


# ---------------------------------------------------------------------------
# Mel analysis
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=8)
def _mel_basis_np(sample_rate: int, fft_size: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    return librosa.filters.mel(sr=sample_rate, n_fft=fft_size, n_mels=n_mels, fmin=fmin, fmax=fmax)


def mel_basis(frame_params: FrameParams, mel_params: MelParams,
              sample_rate: int = SAMPLE_RATE_HZ) -> np.ndarray:
    """Slaney-normalized triangular filterbank shaped (n_mels, F)."""
    mel_params.validate(sample_rate)
    return _mel_basis_np(sample_rate, frame_params.fft_size, mel_params.n_mels,
                         float(mel_params.fmin), float(mel_params.fmax))


def mel_from_bins(bins: torch.Tensor, frame_params: FrameParams, mel_params: MelParams,
                  log_scale: Optional[bool] = None) -> torch.Tensor:
    """Mel frames (..., T, n_mels) from complex bins (..., T, F)."""
    basis = torch.as_tensor(mel_basis(frame_params, mel_params), dtype=bins.real.dtype, device=bins.device)
    mel = bins.abs() @ basis.T
    use_log = mel_params.log_scale if log_scale is None else log_scale
    if use_log:
        mel = torch.log(torch.clamp(mel, min=mel_params.log_floor))
    return mel


def mel_tensor(x: torch.Tensor, frame_params: FrameParams, mel_params: MelParams,
               log_scale: Optional[bool] = None) -> torch.Tensor:
    """Differentiable mel analysis of real signals shaped (..., n)."""
    return mel_from_bins(stft_tensor(x, frame_params), frame_params, mel_params, log_scale)


def mel_spectrogram(w: Waveform, mel_params: MelParams, frame_params: Optional[FrameParams] = None,
                    log_scale: Optional[bool] = None) -> MelSpectrogram:
    """
    Mel magnitude spectrogram of a waveform.

    Frame count equals that of ``stft`` under the same frame parameters.

    Args:
        w: Input waveform.
        mel_params: Filterbank parameters.
        frame_params: Analysis framing; defaults to FrameParams().
        log_scale: Override ``mel_params.log_scale``.

    Raises:
        ConfigError: If fmax exceeds Nyquist.
    """
    mel_params.validate(w.sample_rate_hz)
    frame_params = frame_params or FrameParams()
    frames = mel_tensor(w.to_tensor(torch.float64), frame_params, mel_params, log_scale)
    return MelSpectrogram(frames=frames, mel_params=mel_params)
