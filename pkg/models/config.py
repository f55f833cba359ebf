"""
Run configuration for the background-preserving voice conversion pipeline.

The configuration is a tree of dataclasses:

- AudioConfig: sample rate, STFT frame parameters, mel parameters.
- SeparatorConfig: DCCRN-lite layer sizes and mask bound.
- BottleneckConfig: frozen extractor sizes and seed.
- VcConfig: CLSTM encoder, generator and discriminator sizes.
- LossConfig: PLCPA-ASYM coefficients and multi-task weights.
- DataConfig: SNR range, cropping and batching.
- TrainingConfig: stage budgets, optimizer, seeds, determinism, ablation.
- EvaluationConfig: SI-SDR cap, figure size, external scorer.

Every section can be serialized with ``to_dict`` and rebuilt with
``from_dict``; unknown keys are rejected.
"""

import json
import math
import os
import tempfile
import typing
from dataclasses import dataclass, field, fields, is_dataclass, asdict
from typing import Any, Dict, Optional, Tuple

import yaml

from utils.errors import ConfigError

SAMPLE_RATE_HZ = 16000
CONFIG_ENV_VAR = "BGVC_CONFIG"

STAGE_NAMES = ("vc", "ss", "joint")
ABLATIONS = ("ss-loss", "vc-loss", "no-joint")
WINDOWS = ("hann", "rect")


@dataclass
class FrameParams:
    """
    STFT framing parameters.

    Attributes:
        fft_size: FFT length and window length in samples.
        hop: Hop size in samples.
        window: "hann" (periodic Hann) or "rect".
        center: Zero-pad fft_size // 2 on both sides before framing.
    """
    fft_size: int = 1024
    hop: int = 256
    window: str = "hann"
    center: bool = True

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def validate(self) -> None:
        if self.fft_size <= 0 or self.fft_size % 2:
            raise ConfigError(f"fft_size must be a positive even integer, got {self.fft_size}")
        if self.hop <= 0:
            raise ConfigError(f"hop must be positive, got {self.hop}")
        if self.hop > self.fft_size:
            raise ConfigError(f"hop ({self.hop}) must not exceed fft_size ({self.fft_size})")
        if self.window not in WINDOWS:
            raise ConfigError(f"window must be one of {WINDOWS}, got '{self.window}'")


@dataclass
class MelParams:
    """
    Mel analysis parameters.

    Attributes:
        n_mels: Number of mel filters.
        fmin: Lowest filter edge in Hz.
        fmax: Highest filter edge in Hz (must not exceed Nyquist).
        log_scale: Return natural-log mel values floored at log_floor.
        log_floor: Floor applied before the logarithm.
    """
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_scale: bool = True
    log_floor: float = 1e-5

    def validate(self, sample_rate: int = SAMPLE_RATE_HZ) -> None:
        if self.n_mels <= 0:
            raise ConfigError(f"n_mels must be positive, got {self.n_mels}")
        if self.fmin < 0 or self.fmin >= self.fmax:
            raise ConfigError(f"need 0 <= fmin < fmax, got fmin={self.fmin}, fmax={self.fmax}")
        if self.fmax > sample_rate / 2:
            raise ConfigError(f"fmax {self.fmax} Hz exceeds Nyquist {sample_rate / 2} Hz")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")


@dataclass
class AudioConfig:
    sample_rate: int = SAMPLE_RATE_HZ
    frame: FrameParams = field(default_factory=FrameParams)
    mel: MelParams = field(default_factory=MelParams)

    def validate(self) -> None:
        if self.sample_rate != SAMPLE_RATE_HZ:
            raise ConfigError(f"the pipeline runs at {SAMPLE_RATE_HZ} Hz, got {self.sample_rate}")
        self.frame.validate()
        self.mel.validate(self.sample_rate)


@dataclass
class SeparatorConfig:
    """
    DCCRN-lite sizes. Channel widths are complex channels per encoder block.
    """
    channels: Tuple[int, ...] = (16, 32, 64)
    freq_kernel: int = 5
    freq_stride: int = 4
    time_kernel: int = 3
    rnn_hidden: int = 128
    mask_bound: float = 1.0
    input_compress: float = 0.3
    seed: int = 1234

    def validate(self, frame: FrameParams) -> None:
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ConfigError("separator.channels must be a non-empty list of positive ints")
        if self.freq_stride < 2 or self.freq_stride % 2:
            raise ConfigError("separator.freq_stride must be an even integer >= 2")
        reduction = self.freq_stride ** len(self.channels)
        if (frame.fft_size // 2) % reduction:
            raise ConfigError(
                f"fft_size/2 = {frame.fft_size // 2} is not divisible by "
                f"freq_stride**blocks = {reduction}"
            )
        if self.time_kernel % 2 == 0:
            raise ConfigError("separator.time_kernel must be odd")
        if self.mask_bound <= 0:
            raise ConfigError("separator.mask_bound must be positive")
        if not 0 < self.input_compress <= 1:
            raise ConfigError("separator.input_compress must be in (0, 1]")


@dataclass
class BottleneckConfig:
    feature_dim: int = 256
    conv_channels: int = 256
    rnn_hidden: int = 256
    subsample_blocks: int = 2
    seed: int = 20240501

    @property
    def subsample_factor(self) -> int:
        return 2 ** self.subsample_blocks

    def validate(self) -> None:
        if min(self.feature_dim, self.conv_channels, self.rnn_hidden) <= 0:
            raise ConfigError("bottleneck sizes must be positive")
        if self.subsample_blocks < 0:
            raise ConfigError("bottleneck.subsample_blocks must be >= 0")


@dataclass
class VcConfig:
    encoder_channels: int = 256
    encoder_kernel: int = 5
    lstm_hidden: int = 256
    speaker_dim: int = 128
    upsample_rates: Tuple[int, ...] = (8, 8, 4, 4)
    upsample_kernel_sizes: Tuple[int, ...] = (16, 16, 8, 8)
    upsample_initial_channel: int = 256
    resblock_kernel_sizes: Tuple[int, ...] = (3, 7)
    resblock_dilations: Tuple[Tuple[int, ...], ...] = ((1, 3), (1, 3))
    disc_scales: int = 2
    disc_channels: Tuple[int, ...] = (16, 64, 128, 128)
    seed: int = 4321

    @property
    def upsample_factor(self) -> int:
        return math.prod(self.upsample_rates)

    @property
    def disc_layers(self) -> int:
        """Feature layers per sub-discriminator (conv stack plus the score layer)."""
        return len(self.disc_channels) + 1

    def validate(self) -> None:
        if len(self.upsample_rates) != len(self.upsample_kernel_sizes):
            raise ConfigError("vc.upsample_rates and vc.upsample_kernel_sizes differ in length")
        for rate, kernel in zip(self.upsample_rates, self.upsample_kernel_sizes):
            if rate <= 0 or kernel < rate or (kernel - rate) % 2:
                raise ConfigError(
                    f"upsample kernel {kernel} must be >= rate {rate} with an even difference"
                )
        if self.upsample_initial_channel // (2 ** len(self.upsample_rates)) < 1:
            raise ConfigError("vc.upsample_initial_channel too small for the upsample stack")
        if len(self.resblock_kernel_sizes) != len(self.resblock_dilations):
            raise ConfigError("vc.resblock_kernel_sizes and vc.resblock_dilations differ in length")
        if self.encoder_kernel % 2 == 0:
            raise ConfigError("vc.encoder_kernel must be odd (length-preserving)")
        if self.disc_scales < 1 or not self.disc_channels:
            raise ConfigError("need at least one discriminator scale and one conv layer")


@dataclass
class PlcpaConfig:
    """
    PLCPA-ASYM coefficients.

    Attributes:
        p: Power-law compression factor in (0, 1].
        alpha: Weight of the magnitude term against the phase-aware term.
        beta: Weight of the over-suppression term.
    """
    p: float = 0.3
    alpha: float = 0.5
    beta: float = 1.0

    def validate(self) -> None:
        if not 0 < self.p <= 1:
            raise ConfigError(f"p must be in (0, 1], got {self.p}")
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")


@dataclass
class MtlWeights:
    lambda_uni: float = 45.0
    lambda_ss: float = 1.0
    lambda_vc: float = 1.0

    def validate(self) -> None:
        if min(self.lambda_uni, self.lambda_ss, self.lambda_vc) < 0:
            raise ConfigError("multi-task weights must be non-negative")


@dataclass
class LossConfig:
    plcpa: PlcpaConfig = field(default_factory=PlcpaConfig)
    weights: MtlWeights = field(default_factory=MtlWeights)

    def validate(self) -> None:
        self.plcpa.validate()
        self.weights.validate()


@dataclass
class DataConfig:
    snr_min: float = 0.0
    snr_max: float = 10.0
    allow_wrap: bool = False
    crop_seconds: float = 1.0
    pad_short: bool = True
    batch_size: int = 4
    silence_threshold: float = 1e-8

    def validate(self) -> None:
        if self.snr_min > self.snr_max:
            raise ConfigError(f"snr_min ({self.snr_min}) > snr_max ({self.snr_max})")
        if self.crop_seconds <= 0:
            raise ConfigError("data.crop_seconds must be positive")
        if self.batch_size <= 0:
            raise ConfigError("data.batch_size must be positive")


@dataclass
class TrainingConfig:
    vc_steps: int = 2000
    ss_steps: int = 2000
    joint_steps: int = 4000
    learning_rate: float = 2e-4
    betas: Tuple[float, float] = (0.8, 0.99)
    lr_decay: float = 0.999
    seed: int = 0
    deterministic: bool = True
    vc_input: str = "separated"
    log_every: int = 10
    checkpoint_every: int = 500
    freeze_check_every: int = 100
    history_size: int = 256
    ablate: Optional[str] = None

    def steps_for(self, stage: str) -> int:
        return {"vc": self.vc_steps, "ss": self.ss_steps, "joint": self.joint_steps}[stage]

    def validate(self) -> None:
        if min(self.vc_steps, self.ss_steps, self.joint_steps) < 0:
            raise ConfigError("stage step budgets must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("training.learning_rate must be positive")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("training.betas must be two values in [0, 1)")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("training.lr_decay must be in (0, 1]")
        if self.vc_input not in ("separated", "clean"):
            raise ConfigError("training.vc_input must be 'separated' or 'clean'")
        if self.ablate is not None and self.ablate not in ABLATIONS:
            raise ConfigError(f"training.ablate must be one of {ABLATIONS}")
        if min(self.log_every, self.checkpoint_every, self.freeze_check_every) <= 0:
            raise ConfigError("training intervals must be positive")


@dataclass
class EvaluationConfig:
    si_sdr_cap_db: float = 100.0
    figure_width: float = 8.0
    figure_height: float = 4.0
    figure_dpi: int = 100
    pesq_command: Optional[str] = None

    def validate(self) -> None:
        if self.si_sdr_cap_db <= 0:
            raise ConfigError("evaluation.si_sdr_cap_db must be positive")
        if self.figure_width <= 0 or self.figure_height <= 0 or self.figure_dpi <= 0:
            raise ConfigError("figure size and dpi must be positive")


@dataclass
class RunConfig:
    """Complete, validated configuration of one run."""
    audio: AudioConfig = field(default_factory=AudioConfig)
    separator: SeparatorConfig = field(default_factory=SeparatorConfig)
    bottleneck: BottleneckConfig = field(default_factory=BottleneckConfig)
    vc: VcConfig = field(default_factory=VcConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def validate(self) -> "RunConfig":
        """Validate every section and the cross-section frame-rate constraint."""
        self.audio.validate()
        self.separator.validate(self.audio.frame)
        self.bottleneck.validate()
        self.vc.validate()
        self.losses.validate()
        self.data.validate()
        self.training.validate()
        self.evaluation.validate()
        bn_hop = self.bottleneck.subsample_factor * self.audio.frame.hop
        if bn_hop != self.vc.upsample_factor:
            raise ConfigError(
                f"bottleneck frame hop ({self.bottleneck.subsample_factor} x "
                f"{self.audio.frame.hop} = {bn_hop} samples) must equal the generator "
                f"upsample factor ({self.vc.upsample_factor})"
            )
        return self

    @classmethod
    def toy(cls) -> "RunConfig":
        """Desk-scale preset used by the tests and the overfit smoke run."""
        return cls(
            audio=AudioConfig(
                frame=FrameParams(fft_size=256, hop=64),
                mel=MelParams(n_mels=40),
            ),
            bottleneck=BottleneckConfig(feature_dim=64, conv_channels=64, rnn_hidden=64),
            vc=VcConfig(
                encoder_channels=64,
                lstm_hidden=64,
                speaker_dim=32,
                upsample_rates=(8, 8, 4),
                upsample_kernel_sizes=(16, 16, 8),
                upsample_initial_channel=64,
                resblock_kernel_sizes=(3,),
                resblock_dilations=((1, 3),),
                disc_channels=(8, 16, 32),
            ),
            data=DataConfig(batch_size=2),
        ).validate()

    def architecture_dict(self) -> Dict[str, Any]:
        """The sections that determine parameter shapes."""
        return {
            "audio": asdict(self.audio),
            "separator": asdict(self.separator),
            "bottleneck": asdict(self.bottleneck),
            "vc": asdict(self.vc),
        }

    def to_dict(self) -> Dict[str, Any]:
        """Convert to a plain dictionary (tuples become lists)."""
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        """Build and validate a RunConfig; missing keys keep their defaults."""
        return section_from_dict(cls, data or {}, "config").validate()

    @classmethod
    def from_yaml(cls, path: str) -> "RunConfig":
        """
        Load a configuration file.

        Raises:
            FileNotFoundError: If the file does not exist.
            ConfigError: On YAML syntax errors, unknown keys or invalid values.
        """
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise ConfigError(f"Cannot parse config file '{path}': {e}")
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"Config file '{path}' must contain a mapping at top level")
        preset = (data or {}).pop("preset", "default")
        base = cls.toy() if preset == "toy" else cls() if preset == "default" else None
        if base is None:
            raise ConfigError(f"Unknown preset '{preset}' (expected 'default' or 'toy')")
        return cls.from_dict(_deep_merge(base.to_dict(), data or {}))

    @classmethod
    def resolve(cls, path: Optional[str] = None) -> "RunConfig":
        """Load ``path``, else the file named by $BGVC_CONFIG, else the defaults."""
        path = path or os.environ.get(CONFIG_ENV_VAR)
        return cls.from_yaml(path) if path else cls().validate()

    def save_yaml(self, path: str) -> None:
        """Write the configuration snapshot atomically."""
        target_dir = os.path.dirname(os.path.abspath(path))
        os.makedirs(target_dir, exist_ok=True)
        fd, tmp_path = tempfile.mkstemp(dir=target_dir, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                yaml.safe_dump(self.to_dict(), f, sort_keys=False)
            os.replace(tmp_path, path)
        except Exception:
            try:
                os.unlink(tmp_path)
            except OSError:
                pass
            raise


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def section_from_dict(cls, data: Dict[str, Any], path: str = "config"):
    """Recursively build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"'{path}' must be a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown config key(s) under '{path}': {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if is_dataclass(hint):
            kwargs[name] = section_from_dict(hint, value, f"{path}.{name}")
        else:
            kwargs[name] = _coerce(value, hint, f"{path}.{name}")
    return cls(**kwargs)


def _coerce(value: Any, hint: Any, path: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"'{path}' must be a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], path) for v in value)
        if len(value) != len(args):
            raise ConfigError(f"'{path}' must have {len(args)} entries")
        return tuple(_coerce(v, a, path) for v, a in zip(value, args))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"'{path}' must be true or false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{path}' must be an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{path}' must be a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"'{path}' must be a string")
        return value
    return value
