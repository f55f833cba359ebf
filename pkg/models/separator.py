"""
Complex encoder / recurrent / decoder separator estimating two complex ratio
masks (speech and background) from a mixture spectrogram.

Complex layers are pairs of real layers combined by the complex product
rule: (Wr + jWi)(xr + jxi) = (Wr xr - Wi xi) + j(Wr xi + Wi xr). Complex
feature maps travel as (real, imag) tuples shaped (B, C, F, T).
"""

import logging
from typing import List, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from models.config import FrameParams, SeparatorConfig
from models.data_models import (
    ComplexRatioMask,
    ComplexSpectrogram,
    SeparationOutput,
    Waveform,
)
from models.params import count_parameters, seeded
from utils.dsp import apply_crm, compress_bins, istft, stft

logger = logging.getLogger(__name__)

Complex = Tuple[torch.Tensor, torch.Tensor]


class ComplexConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=True):
        super().__init__()
        self.conv_re = nn.Conv2d(in_channels, out_channels, kernel_size, stride, padding, bias=bias)
        self.conv_im = nn.Conv2d(in_channels, out_channels, kernel_size, stride, padding, bias=bias)

    def forward(self, x: Complex) -> Complex:
        re, im = x
        return (self.conv_re(re) - self.conv_im(im),
                self.conv_re(im) + self.conv_im(re))


class ComplexConvTranspose2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0):
        super().__init__()
        self.conv_re = nn.ConvTranspose2d(in_channels, out_channels, kernel_size, stride, padding)
        self.conv_im = nn.ConvTranspose2d(in_channels, out_channels, kernel_size, stride, padding)

    def forward(self, x: Complex) -> Complex:
        re, im = x
        return (self.conv_re(re) - self.conv_im(im),
                self.conv_re(im) + self.conv_im(re))


class ComplexLSTM(nn.Module):
    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.lstm_re = nn.LSTM(input_size, hidden_size, batch_first=True)
        self.lstm_im = nn.LSTM(input_size, hidden_size, batch_first=True)

    def forward(self, x: Complex) -> Complex:
        re, im = x
        rr, _ = self.lstm_re(re)
        ii, _ = self.lstm_im(im)
        ri, _ = self.lstm_re(im)
        ir, _ = self.lstm_im(re)
        return rr - ii, ri + ir


class ComplexLinear(nn.Module):
    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.fc_re = nn.Linear(in_features, out_features)
        self.fc_im = nn.Linear(in_features, out_features)

    def forward(self, x: Complex) -> Complex:
        re, im = x
        return self.fc_re(re) - self.fc_im(im), self.fc_re(im) + self.fc_im(re)


class ComplexPReLU(nn.Module):
    def __init__(self):
        super().__init__()
        self.act_re = nn.PReLU()
        self.act_im = nn.PReLU()

    def forward(self, x: Complex) -> Complex:
        return self.act_re(x[0]), self.act_im(x[1])


class EncoderBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, cfg: SeparatorConfig):
        super().__init__()
        self.conv = ComplexConv2d(
            in_channels, out_channels,
            kernel_size=(cfg.freq_kernel, cfg.time_kernel),
            stride=(cfg.freq_stride, 1),
            padding=(cfg.freq_kernel // 2, cfg.time_kernel // 2),
        )
        self.act = ComplexPReLU()

    def forward(self, x: Complex) -> Complex:
        return self.act(self.conv(x))


class DecoderBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, cfg: SeparatorConfig):
        super().__init__()
        # kernel 2*stride with padding stride/2 upsamples exactly by stride
        self.conv = ComplexConvTranspose2d(
            in_channels * 2, out_channels,
            kernel_size=(2 * cfg.freq_stride, cfg.time_kernel),
            stride=(cfg.freq_stride, 1),
            padding=(cfg.freq_stride // 2, cfg.time_kernel // 2),
        )
        self.act = ComplexPReLU()

    def forward(self, x: Complex, skip: Complex) -> Complex:
        x = (torch.cat([x[0], skip[0]], dim=1), torch.cat([x[1], skip[1]], dim=1))
        return self.act(self.conv(x))


def bound_mask(re: torch.Tensor, im: torch.Tensor, bound: float) -> torch.Tensor:
    """Saturate a raw mask estimate: magnitude bound * tanh(|m|), phase kept."""
    mag = torch.sqrt(re ** 2 + im ** 2 + 1e-8)
    scale = bound * torch.tanh(mag) / mag
    return torch.complex(re * scale, im * scale)


class Separator(nn.Module):
    """
    Dual-mask complex separator.

    The Nyquist bin is dropped before encoding and its mask copied from the
    bin below, so fft_size / 2 must be divisible by freq_stride ** blocks.
    """

    def __init__(self, cfg: SeparatorConfig, frame: FrameParams):
        super().__init__()
        cfg.validate(frame)
        self.cfg = cfg
        self.frame = frame
        reduced_bins = (frame.fft_size // 2) // (cfg.freq_stride ** len(cfg.channels))
        rnn_size = cfg.channels[-1] * reduced_bins
        with seeded(cfg.seed):
            self.encoder = nn.ModuleList()
            in_ch = 1
            for out_ch in cfg.channels:
                self.encoder.append(EncoderBlock(in_ch, out_ch, cfg))
                in_ch = out_ch
            self.rnn = ComplexLSTM(rnn_size, cfg.rnn_hidden)
            self.rnn_proj = ComplexLinear(cfg.rnn_hidden, rnn_size)
            dec_out = list(cfg.channels[:-1][::-1]) + [cfg.channels[0]]
            self.decoder = nn.ModuleList()
            in_ch = cfg.channels[-1]
            for out_ch in dec_out:
                self.decoder.append(DecoderBlock(in_ch, out_ch, cfg))
                in_ch = out_ch
            self.head_speech = ComplexConv2d(in_ch, 1, kernel_size=1)
            self.head_background = ComplexConv2d(in_ch, 1, kernel_size=1)
        logger.debug("[Separator] %d parameters", count_parameters(self))

    def forward(self, mix_bins: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Estimate both masks.

        Args:
            mix_bins: Complex mixture bins (B, T, F) or (T, F).

        Returns:
            (speech_mask, background_mask), complex, shaped like ``mix_bins``.
        """
        squeeze = mix_bins.dim() == 2
        if squeeze:
            mix_bins = mix_bins.unsqueeze(0)
        if mix_bins.shape[-1] != self.frame.n_bins:
            raise ValueError(
                f"mixture has {mix_bins.shape[-1]} bins; separator expects {self.frame.n_bins}"
            )
        dtype = self.head_speech.conv_re.weight.dtype
        x = compress_bins(mix_bins, self.cfg.input_compress)[..., :-1]
        x = x.transpose(1, 2).unsqueeze(1)  # (B, 1, F-1, T)
        h: Complex = (x.real.to(dtype), x.imag.to(dtype))

        skips: List[Complex] = []
        for block in self.encoder:
            h = block(h)
            skips.append(h)

        b, c, f, t = h[0].shape
        flat = tuple(part.permute(0, 3, 1, 2).reshape(b, t, c * f) for part in h)
        flat = self.rnn_proj(self.rnn(flat))
        h = tuple(part.reshape(b, t, c, f).permute(0, 2, 3, 1) for part in flat)

        for block in self.decoder:
            h = block(h, skips.pop())

        masks = []
        for head in (self.head_speech, self.head_background):
            re, im = head(h)
            mask = bound_mask(re[:, 0], im[:, 0], self.cfg.mask_bound).transpose(1, 2)
            mask = torch.cat([mask, mask[..., -1:]], dim=-1)
            masks.append(mask.squeeze(0) if squeeze else mask)
        return masks[0], masks[1]


def separate_spec(mix: ComplexSpectrogram, separator: Separator,
                  force_identity_masks: bool = False) -> SeparationOutput:
    """
    Estimate both sources of a mixture spectrogram.

    Args:
        mix: Mixture spectrogram from ``stft`` under the separator's frame params.
        separator: Trained (or seeded) separator.
        force_identity_masks: Replace both masks by 1+0j.

    Raises:
        ValueError: If the frame parameters differ from the separator's.
    """
    if mix.frame_params is not None and mix.frame_params != separator.frame:
        raise ValueError(f"mixture frame params {mix.frame_params} differ from separator's {separator.frame}")
    if force_identity_masks:
        mask_s = torch.ones_like(mix.bins)
        mask_b = torch.ones_like(mix.bins)
    else:
        mask_s, mask_b = separator(mix.bins)
        mask_s = mask_s.to(mix.bins.dtype)
        mask_b = mask_b.to(mix.bins.dtype)
    crm_s, crm_b = ComplexRatioMask(mask_s), ComplexRatioMask(mask_b)
    return SeparationOutput(
        crm_speech=crm_s,
        crm_background=crm_b,
        est_speech=apply_crm(mix, crm_s),
        est_background=apply_crm(mix, crm_b),
    )


def separate_wave(mix: Waveform, separator: Separator,
                  force_identity_masks: bool = False) -> Tuple[Waveform, Waveform]:
    """
    Separate a waveform into (speech, background), each as long as ``mix``.
    """
    with torch.no_grad():
        out = separate_spec(stft(mix, separator.frame), separator, force_identity_masks)
        return istft(out.est_speech), istft(out.est_background)
