"""
Voice conversion module: CLSTM encoder over bottleneck features, speaker
lookup table, upsampling waveform generator, and multi-scale
discriminators used for adversarial training.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Union

import torch
import torch.nn.functional as F
from torch import nn

from models.config import SAMPLE_RATE_HZ, VcConfig
from models.data_models import BottleneckFeatures, Waveform
from models.params import count_parameters, seeded
from utils.errors import UnknownSpeakerError

logger = logging.getLogger(__name__)

LRELU_SLOPE = 0.1


def get_padding(kernel_size: int, dilation: int = 1) -> int:
    return (kernel_size * dilation - dilation) // 2


class SpeakerTable(nn.Module):
    """
    Registry of known speakers and their embedding vectors.

    Ids are kept sorted, so the same id set always maps to the same rows.
    """

    def __init__(self, speaker_ids: Iterable[str], dim: int):
        super().__init__()
        self.ids: List[str] = sorted(set(speaker_ids))
        if not self.ids:
            raise ValueError("a speaker table needs at least one speaker")
        self.dim = dim
        self.embedding = nn.Embedding(len(self.ids), dim)

    @classmethod
    def from_ids(cls, speaker_ids: Iterable[str], dim: int, seed: int = 0) -> "SpeakerTable":
        with seeded(seed):
            return cls(speaker_ids, dim)

    def __contains__(self, speaker_id: str) -> bool:
        return speaker_id in self.ids

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, speaker_id: str) -> int:
        try:
            return self.ids.index(speaker_id)
        except ValueError:
            raise UnknownSpeakerError(f"Unknown speaker '{speaker_id}'; known speakers: {self.ids}")

    def indices(self, speaker_ids: Sequence[str]) -> torch.Tensor:
        return torch.tensor([self.index(s) for s in speaker_ids], dtype=torch.long,
                            device=self.embedding.weight.device)

    def forward(self, speaker_ids: Union[Sequence[str], torch.Tensor]) -> torch.Tensor:
        if not isinstance(speaker_ids, torch.Tensor):
            speaker_ids = self.indices(speaker_ids)
        return self.embedding(speaker_ids)


class ClstmEncoder(nn.Module):
    """Three length-preserving conv + LeakyReLU stacks followed by an LSTM."""

    def __init__(self, input_dim: int, cfg: VcConfig):
        super().__init__()
        convs = []
        in_ch = input_dim
        for _ in range(3):
            convs.append(nn.Conv1d(in_ch, cfg.encoder_channels, cfg.encoder_kernel,
                                   padding=cfg.encoder_kernel // 2))
            in_ch = cfg.encoder_channels
        self.convs = nn.ModuleList(convs)
        self.lstm = nn.LSTM(cfg.encoder_channels, cfg.lstm_hidden, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, L, d) -> (B, L, lstm_hidden)."""
        x = x.transpose(1, 2)
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        x, _ = self.lstm(x.transpose(1, 2))
        return x


class ResBlock(nn.Module):
    def __init__(self, channels: int, kernel_size: int, dilations: Sequence[int]):
        super().__init__()
        self.convs1 = nn.ModuleList([
            nn.Conv1d(channels, channels, kernel_size, dilation=d, padding=get_padding(kernel_size, d))
            for d in dilations
        ])
        self.convs2 = nn.ModuleList([
            nn.Conv1d(channels, channels, kernel_size, padding=get_padding(kernel_size))
            for _ in dilations
        ])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv1, conv2 in zip(self.convs1, self.convs2):
            xt = conv2(F.leaky_relu(conv1(F.leaky_relu(x, LRELU_SLOPE)), LRELU_SLOPE))
            x = x + xt
        return x


class Generator(nn.Module):
    """
    Transposed-conv upsampling stack with multi-receptive-field residual
    blocks. The speaker embedding is concatenated to every input frame.

    Output length is input length times ``cfg.upsample_factor``.
    """

    def __init__(self, hidden_dim: int, cfg: VcConfig):
        super().__init__()
        self.conv_pre = nn.Conv1d(hidden_dim + cfg.speaker_dim, cfg.upsample_initial_channel, 7, padding=3)
        self.ups = nn.ModuleList()
        self.mrfs = nn.ModuleList()
        for i, (u, k) in enumerate(zip(cfg.upsample_rates, cfg.upsample_kernel_sizes)):
            in_ch = cfg.upsample_initial_channel // (2 ** i)
            out_ch = cfg.upsample_initial_channel // (2 ** (i + 1))
            self.ups.append(nn.ConvTranspose1d(in_ch, out_ch, k, stride=u, padding=(k - u) // 2))
            self.mrfs.append(nn.ModuleList([
                ResBlock(out_ch, ks, ds)
                for ks, ds in zip(cfg.resblock_kernel_sizes, cfg.resblock_dilations)
            ]))
        self.conv_post = nn.Conv1d(cfg.upsample_initial_channel // (2 ** len(cfg.upsample_rates)), 1, 7, padding=3)

    def forward(self, hidden: torch.Tensor, speaker: torch.Tensor) -> torch.Tensor:
        """(B, L, H) hidden + (B, e) speaker embedding -> (B, L * upsample_factor)."""
        cond = speaker.unsqueeze(1).expand(-1, hidden.shape[1], -1)
        x = self.conv_pre(torch.cat([hidden, cond], dim=-1).transpose(1, 2))
        for up, mrf in zip(self.ups, self.mrfs):
            x = up(F.leaky_relu(x, LRELU_SLOPE))
            x = sum(block(x) for block in mrf) / len(mrf)
        x = self.conv_post(F.leaky_relu(x, LRELU_SLOPE))
        return torch.tanh(x)[:, 0]


class VcModel(nn.Module):
    """Encoder, speaker table and generator: the VC parameter store."""

    def __init__(self, cfg: VcConfig, input_dim: int, speaker_ids: Iterable[str]):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.input_dim = input_dim
        with seeded(cfg.seed):
            self.encoder = ClstmEncoder(input_dim, cfg)
            self.speakers = SpeakerTable(speaker_ids, cfg.speaker_dim)
            self.generator = Generator(cfg.lstm_hidden, cfg)
        logger.debug("[VcModel] %d parameters, %d speakers", count_parameters(self), len(self.speakers))

    def forward(self, bn: torch.Tensor, speaker_idx: torch.Tensor) -> torch.Tensor:
        """(B, L, d) bottleneck frames + (B,) speaker rows -> (B, L * upsample_factor)."""
        return self.generator(self.encoder(bn), self.speakers(speaker_idx))


@dataclass
class DiscriminatorFeatures:
    """Per-discriminator scores and per-layer features (the score is the last layer)."""
    scores: List[torch.Tensor]
    features: List[List[torch.Tensor]]


class ScaleDiscriminator(nn.Module):
    def __init__(self, channels: Sequence[int]):
        super().__init__()
        convs = []
        in_ch = 1
        for i, out_ch in enumerate(channels):
            if i == 0:
                convs.append(nn.Conv1d(in_ch, out_ch, 15, stride=1, padding=7))
            elif i == len(channels) - 1:
                convs.append(nn.Conv1d(in_ch, out_ch, 5, stride=1, padding=2))
            else:
                groups = 4 if in_ch % 4 == 0 and out_ch % 4 == 0 else 1
                convs.append(nn.Conv1d(in_ch, out_ch, 41, stride=4, groups=groups, padding=20))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.conv_post = nn.Conv1d(in_ch, 1, 3, padding=1)

    def forward(self, x: torch.Tensor):
        features = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            features.append(x)
        x = self.conv_post(x)
        features.append(x)
        return x, features


class MultiScaleDiscriminator(nn.Module):
    """``disc_scales`` discriminators, each on a further 2x average-pooled signal."""

    def __init__(self, cfg: VcConfig):
        super().__init__()
        with seeded(cfg.seed + 1):
            self.discriminators = nn.ModuleList([
                ScaleDiscriminator(cfg.disc_channels) for _ in range(cfg.disc_scales)
            ])
        self.pool = nn.AvgPool1d(4, 2, padding=2)

    def forward(self, wave: torch.Tensor) -> DiscriminatorFeatures:
        """(B, n) waveforms -> scores and features of every scale."""
        x = wave.unsqueeze(1)
        scores, features = [], []
        for i, disc in enumerate(self.discriminators):
            if i > 0:
                x = self.pool(x)
            score, feats = disc(x)
            scores.append(score)
            features.append(feats)
        return DiscriminatorFeatures(scores=scores, features=features)


def encode(bn: BottleneckFeatures, vc: VcModel) -> torch.Tensor:
    """
    Hidden sequence (L, lstm_hidden) of one utterance's bottleneck features.

    Raises:
        ValueError: If the feature dimension differs from the encoder's input.
    """
    if bn.dim != vc.input_dim:
        raise ValueError(f"bottleneck dimension {bn.dim} does not match VC encoder input {vc.input_dim}")
    frames = bn.frames.to(next(vc.parameters()).dtype)
    return vc.encoder(frames.unsqueeze(0))[0]


def generate(hidden: torch.Tensor, speaker_id: str, vc: VcModel) -> Waveform:
    """
    Waveform of ``len(hidden) * upsample_factor`` samples in ``speaker_id``'s voice.

    Raises:
        UnknownSpeakerError: If the speaker is not in the table.
    """
    speaker = vc.speakers([speaker_id])
    with torch.no_grad():
        audio = vc.generator(hidden.unsqueeze(0), speaker)[0]
    return Waveform(audio.detach().cpu().double().numpy(), SAMPLE_RATE_HZ)


def discriminate(w: Union[Waveform, torch.Tensor], disc: MultiScaleDiscriminator) -> DiscriminatorFeatures:
    """Scores and per-layer features of a waveform (or a (B, n) batch)."""
    if isinstance(w, Waveform):
        wave = w.to_tensor(next(disc.parameters()).dtype).unsqueeze(0)
    else:
        wave = w if w.dim() == 2 else w.unsqueeze(0)
    return disc(wave)
