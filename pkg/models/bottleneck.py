"""
Frozen linguistic-feature extractor.

The default extractor is a log-mel frontend, ``subsample_blocks`` strided
convolutions (each halving the frame rate) and one recurrent layer, with
parameters drawn from a fixed seed and never trained. An externally
trained extractor of the same shape can be plugged in through the
interchange container (``save_external`` / ``load_external``), and
per-utterance feature files can bypass the network entirely.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict
from typing import Optional

import numpy as np
import torch
from torch import nn

from models.config import AudioConfig, BottleneckConfig, section_from_dict
from models.data_models import _SCHEMA_VERSION, BottleneckFeatures, Waveform, atomic_write
from models.params import param_hash, seeded, set_requires_grad
from utils.dsp import mel_tensor, num_frames
from utils.errors import CheckpointError, ConfigError, DataError

logger = logging.getLogger(__name__)

PROVENANCE_SEEDED = "seeded-default"
PROVENANCE_EXTERNAL = "externally-loaded"
CONTAINER_KIND = "bottleneck-extractor"


class BottleneckExtractor(nn.Module):
    def __init__(self, cfg: BottleneckConfig, audio: AudioConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.audio = audio
        with seeded(cfg.seed):
            layers = []
            in_ch = audio.mel.n_mels
            for _ in range(cfg.subsample_blocks):
                layers += [nn.Conv1d(in_ch, cfg.conv_channels, kernel_size=3, stride=2, padding=1), nn.ReLU()]
                in_ch = cfg.conv_channels
            self.subsample = nn.Sequential(*layers)
            self.rnn = nn.LSTM(in_ch, cfg.rnn_hidden, batch_first=True)
            self.proj = nn.Linear(cfg.rnn_hidden, cfg.feature_dim)

    def forward(self, log_mel: torch.Tensor) -> torch.Tensor:
        """(B, T, n_mels) log-mel -> (B, ceil(T / subsample_factor), feature_dim)."""
        x = self.subsample(log_mel.transpose(1, 2)).transpose(1, 2)
        x, _ = self.rnn(x)
        return self.proj(x)

    def extract_tensor(self, wave: torch.Tensor) -> torch.Tensor:
        """
        Features of waveforms shaped (B, n).

        Differentiable with respect to ``wave`` even though the parameters
        are frozen.
        """
        dtype = self.proj.weight.dtype
        log_mel = mel_tensor(wave.to(dtype), self.audio.frame, self.audio.mel, log_scale=True)
        return self(log_mel)


def config_hash(cfg: BottleneckConfig, audio: AudioConfig) -> str:
    payload = json.dumps({"bottleneck": asdict(cfg), "audio": asdict(audio)}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ExtractorHandle:
    """
    A frozen extractor plus its provenance.

    Attributes:
        module: The extractor network (eval mode, requires_grad False).
        config_hash: SHA-256 of the architecture config.
        provenance: "seeded-default" or "externally-loaded".
        precomputed_dir: Optional directory of ``<utterance_id>.npy`` features.
    """

    def __init__(self, module: BottleneckExtractor, provenance: str = PROVENANCE_SEEDED,
                 precomputed_dir: Optional[str] = None):
        module.eval()
        set_requires_grad(module, False)
        self.module = module
        self.config_hash = config_hash(module.cfg, module.audio)
        self.provenance = provenance
        self.precomputed_dir = precomputed_dir

    @classmethod
    def seeded_default(cls, cfg: BottleneckConfig, audio: AudioConfig) -> "ExtractorHandle":
        return cls(BottleneckExtractor(cfg, audio), PROVENANCE_SEEDED)

    @property
    def cfg(self) -> BottleneckConfig:
        return self.module.cfg

    @property
    def feature_dim(self) -> int:
        return self.module.cfg.feature_dim

    def param_hash(self) -> str:
        return param_hash(self.module)

    def expected_frames(self, n_samples: int) -> int:
        """ceil(mel_frames / subsample_factor)."""
        mel_frames = num_frames(n_samples, self.module.audio.frame)
        return -(-mel_frames // self.cfg.subsample_factor)


def extract(speech: Waveform, handle: ExtractorHandle,
            utterance_id: Optional[str] = None) -> BottleneckFeatures:
    """
    Bottleneck features of one utterance.

    When the handle has a precomputed directory and ``utterance_id`` is
    given, the stored features are returned instead.

    Raises:
        DataError: If the waveform is not at the pipeline sample rate.
    """
    if speech.sample_rate_hz != handle.module.audio.sample_rate:
        raise DataError(
            f"extractor expects {handle.module.audio.sample_rate} Hz audio, got {speech.sample_rate_hz} Hz"
        )
    if handle.precomputed_dir and utterance_id:
        return load_precomputed(handle.precomputed_dir, utterance_id, handle.feature_dim,
                                handle.cfg.subsample_factor)
    with torch.no_grad():
        frames = handle.module.extract_tensor(speech.to_tensor().unsqueeze(0))[0]
    return BottleneckFeatures(frames=frames, subsample_factor=handle.cfg.subsample_factor)


def save_external(handle: ExtractorHandle, path: str) -> None:
    """Write the extractor interchange container."""
    blob = {
        "version": _SCHEMA_VERSION,
        "kind": CONTAINER_KIND,
        "config": {"bottleneck": asdict(handle.cfg), "audio": asdict(handle.module.audio)},
        "config_hash": handle.config_hash,
        "state_dict": handle.module.state_dict(),
    }
    atomic_write(path, lambda f: torch.save(blob, f), binary=True)


def load_external(path: str, expected_dim: Optional[int] = None) -> ExtractorHandle:
    """
    Load an extractor from an interchange container.

    Args:
        path: Container written by ``save_external``.
        expected_dim: Feature dimension the VC encoder was built for.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        CheckpointError: On a corrupt file, a newer version, or a config-hash
            mismatch.
        ConfigError: If the feature dimension differs from ``expected_dim``.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Extractor file not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Cannot read extractor container '{path}': {e}")
    if not isinstance(blob, dict) or blob.get("kind") != CONTAINER_KIND:
        raise CheckpointError(f"'{path}' is not a bottleneck extractor container")
    version = blob.get("version", 1)
    if version > _SCHEMA_VERSION:
        raise CheckpointError(
            f"'{path}' was written by a newer version of this tool "
            f"(file version {version}, current version {_SCHEMA_VERSION})."
        )
    try:
        cfg = section_from_dict(BottleneckConfig, blob["config"]["bottleneck"], "bottleneck")
        audio = section_from_dict(AudioConfig, blob["config"]["audio"], "audio")
    except (KeyError, ConfigError) as e:
        raise CheckpointError(f"'{path}' has an invalid config header: {e}")
    if config_hash(cfg, audio) != blob.get("config_hash"):
        raise CheckpointError(f"'{path}': config hash does not match its config header")
    if expected_dim is not None and cfg.feature_dim != expected_dim:
        raise ConfigError(
            f"extractor feature dimension {cfg.feature_dim} does not match the "
            f"VC encoder input dimension {expected_dim}"
        )
    module = BottleneckExtractor(cfg, audio)
    try:
        module.load_state_dict(blob["state_dict"])
    except (KeyError, RuntimeError) as e:
        raise CheckpointError(f"'{path}': parameter arrays do not match the config header: {e}")
    logger.info("[Extractor] loaded %s (d=%d)", path, cfg.feature_dim)
    return ExtractorHandle(module, PROVENANCE_EXTERNAL)


def save_precomputed(features: BottleneckFeatures, directory: str, utterance_id: str) -> str:
    path = os.path.join(directory, f"{utterance_id}.npy")
    frames = features.frames.detach().cpu().numpy()
    atomic_write(path, lambda f: np.save(f, frames), binary=True)
    return path


def load_precomputed(directory: str, utterance_id: str, expected_dim: int,
                     subsample_factor: int = 4) -> BottleneckFeatures:
    """
    Read ``<directory>/<utterance_id>.npy`` as a (t, d) feature array.

    Raises:
        DataError: If the file is missing or not 2-D.
        ConfigError: If d differs from ``expected_dim``.
    """
    path = os.path.join(directory, f"{utterance_id}.npy")
    if not os.path.exists(path):
        raise DataError(f"No precomputed features for '{utterance_id}' in {directory}")
    frames = np.load(path, allow_pickle=False)
    if frames.ndim != 2:
        raise DataError(f"{path}: expected a (t, d) array, got shape {frames.shape}")
    if frames.shape[1] != expected_dim:
        raise ConfigError(f"{path}: feature dimension {frames.shape[1]} != expected {expected_dim}")
    return BottleneckFeatures(frames=torch.from_numpy(frames).float(), subsample_factor=subsample_factor)
