"""
Inference pipeline: separate -> extract -> encode -> generate, then
optionally superimpose the separated background on the converted voice.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from models.bottleneck import ExtractorHandle, extract
from models.config import SAMPLE_RATE_HZ
from models.conversion import VcModel, encode, generate
from models.data_models import Waveform
from models.separator import Separator, separate_wave
from utils.errors import DataError

logger = logging.getLogger(__name__)

VC_STUBS = ("identity",)


@dataclass
class PipelineModels:
    """All parameter stores needed for conversion."""
    separator: Separator
    extractor: ExtractorHandle
    vc: Optional[VcModel] = None

    def eval(self) -> "PipelineModels":
        self.separator.eval()
        if self.vc is not None:
            self.vc.eval()
        return self


@dataclass
class ConversionParts:
    """Every intermediate signal of one conversion, all as long as ``mix``."""
    mix: Waveform
    speech: Waveform
    background: Waveform
    converted: Waveform
    output: Waveform


def fit_length(samples: np.ndarray, length: int) -> np.ndarray:
    """Trim or zero-pad ``samples`` to ``length``."""
    if len(samples) >= length:
        return samples[:length]
    return np.pad(samples, (0, length - len(samples)))


def convert_parts(mix: Waveform, target_speaker: str, models: PipelineModels,
                  keep_background: bool = True, vc_stub: Optional[str] = None,
                  force_identity_masks: bool = False) -> ConversionParts:
    """
    Run the full conversion and keep every intermediate signal.

    The generated voice is trimmed to the mixture length; with
    ``keep_background`` the separated background is added at unit gain.

    Args:
        mix: Input waveform at 16 kHz.
        target_speaker: Speaker id from the VC speaker table.
        models: Separator, extractor and VC model.
        keep_background: Superimpose the separated background.
        vc_stub: "identity" passes the separated speech through unchanged.
        force_identity_masks: Bypass the separator's masks (1+0j).

    Raises:
        DataError: On a foreign sample rate.
        UnknownSpeakerError: If the target speaker is not known.
    """
    if mix.sample_rate_hz != SAMPLE_RATE_HZ:
        raise DataError(f"input is sampled at {mix.sample_rate_hz} Hz; expected {SAMPLE_RATE_HZ} Hz")
    if vc_stub is not None and vc_stub not in VC_STUBS:
        raise ValueError(f"unknown VC stub '{vc_stub}' (expected one of {VC_STUBS})")
    if vc_stub is None:
        if models.vc is None:
            raise ValueError("no VC model loaded; pass vc_stub='identity' to skip conversion")
        models.vc.speakers.index(target_speaker)

    speech, background = separate_wave(mix, models.separator, force_identity_masks)
    if vc_stub == "identity":
        converted = speech
    else:
        converted = resynthesize(speech, target_speaker, models, len(mix))

    if keep_background:
        output = Waveform(converted.samples + fit_length(background.samples, len(converted)), SAMPLE_RATE_HZ)
    else:
        output = converted
    return ConversionParts(mix=mix, speech=speech, background=background, converted=converted, output=output)


def resynthesize(speech: Waveform, target_speaker: str, models: PipelineModels, length: int) -> Waveform:
    """extract -> encode -> generate, trimmed or padded to ``length`` samples."""
    with torch.no_grad():
        hidden = encode(extract(speech, models.extractor), models.vc)
    generated = generate(hidden, target_speaker, models.vc)
    return Waveform(fit_length(generated.samples, length), SAMPLE_RATE_HZ)


def upper_bound_parts(speech: Waveform, background: Waveform, target_speaker: str,
                      models: PipelineModels) -> ConversionParts:
    """
    Reference conversion: the clean source speech is converted directly and
    the original background is added back.

    Raises:
        DataError: If the two signals differ in length or sample rate.
        UnknownSpeakerError: If the target speaker is not known.
    """
    if len(speech) != len(background):
        raise DataError(f"speech has {len(speech)} samples but background has {len(background)}")
    if speech.sample_rate_hz != SAMPLE_RATE_HZ or background.sample_rate_hz != SAMPLE_RATE_HZ:
        raise DataError(f"references must be sampled at {SAMPLE_RATE_HZ} Hz")
    if models.vc is None:
        raise ValueError("the upper-bound system needs a VC model")
    models.vc.speakers.index(target_speaker)
    mix = Waveform(speech.samples + background.samples, SAMPLE_RATE_HZ)
    converted = resynthesize(speech, target_speaker, models, len(speech))
    output = Waveform(converted.samples + background.samples, SAMPLE_RATE_HZ)
    return ConversionParts(mix=mix, speech=speech, background=background, converted=converted, output=output)


def convert(mix: Waveform, target_speaker: str, keep_background: bool, models: PipelineModels,
            vc_stub: Optional[str] = None) -> Waveform:
    """Convert the voice in ``mix`` to ``target_speaker``."""
    return convert_parts(mix, target_speaker, models, keep_background, vc_stub).output
