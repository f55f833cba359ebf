"""
Data pipeline: toy corpus generation, SNR-controlled mixing, mixture-set
files on disk, and batch assembly for training.

Dataset directory layout written by ``build_mixture_set``::

    <out_dir>/mixtures.jsonl            one MixtureRecord per line
    <out_dir>/mix/<id>.wav              mixture
    <out_dir>/speech/<id>.wav           clean speech reference
    <out_dir>/background/<id>.wav       clipped, scaled background reference
    <out_dir>/mixspec/<id>.mixspec.json MixSpec sidecar
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import soundfile as sf
import torch

from models.config import DataConfig, FrameParams, MelParams, SAMPLE_RATE_HZ
from models.data_models import (
    BACKGROUND,
    SPEECH,
    Manifest,
    ManifestRecord,
    MixSpec,
    MixtureRecord,
    TrainingExample,
    Waveform,
    atomic_write,
    atomic_write_json,
)
from utils.dsp import mel_from_bins, read_wav, stft_tensor, write_wav
from utils.errors import DataError

logger = logging.getLogger(__name__)

MIXTURE_MANIFEST = "mixtures.jsonl"


# ---------------------------------------------------------------------------
# Mixing
# ---------------------------------------------------------------------------

def snr_db(speech: np.ndarray, background: np.ndarray) -> float:
    """10 * log10 of the speech-to-background mean-power ratio."""
    return float(10.0 * np.log10(np.mean(speech ** 2) / np.mean(background ** 2)))


def clip_background(background: Waveform, offset: int, length: int, allow_wrap: bool = False) -> np.ndarray:
    """
    ``length`` background samples starting at ``offset``.

    Raises:
        DataError: If the offset is out of range, or the background is too
            short and wrap-around is not allowed.
    """
    n_bg = len(background)
    if n_bg == 0:
        raise DataError("background is empty")
    if not 0 <= offset < n_bg:
        raise DataError(f"background offset {offset} outside [0, {n_bg})")
    if offset + length <= n_bg:
        return background.samples[offset:offset + length]
    if not allow_wrap:
        raise DataError(
            f"background has {n_bg - offset} samples after offset {offset}, "
            f"speech needs {length} (enable data.allow_wrap to loop it)"
        )
    return background.samples[(offset + np.arange(length)) % n_bg]


def mix_at_snr(speech: Waveform, background: Waveform, spec: MixSpec,
               speaker_id: str = "", allow_wrap: bool = False,
               silence_threshold: float = 1e-8,
               snr_range: Optional[Tuple[float, float]] = None) -> TrainingExample:
    """
    Mix speech with a background clip at ``spec.snr_db``.

    The background is clipped at ``spec.background_offset`` to the speech
    length and scaled by g so that the mean-power ratio over the whole
    utterance equals the target SNR. If the mixture peak exceeds 1, all three
    signals are scaled by the same factor (recorded as ``norm_scale``).

    Raises:
        DataError: For silent speech or background, a too-short background,
            mismatched sample rates, or an SNR outside ``snr_range``.
    """
    if speech.sample_rate_hz != background.sample_rate_hz:
        raise DataError(
            f"speech at {speech.sample_rate_hz} Hz and background at {background.sample_rate_hz} Hz"
        )
    if snr_range is not None and not snr_range[0] <= spec.snr_db <= snr_range[1]:
        raise DataError(f"SNR {spec.snr_db} dB outside the configured range {snr_range}")
    p_speech = speech.power()
    if p_speech <= silence_threshold:
        raise DataError(f"speech '{spec.speech_id}' is silent (power {p_speech:.3g})")
    clip = clip_background(background, spec.background_offset, len(speech), allow_wrap)
    p_bg = float(np.mean(clip ** 2))
    if p_bg <= silence_threshold:
        raise DataError(
            f"background '{spec.background_id}' is silent at offset {spec.background_offset}; "
            "no gain can reach the requested SNR"
        )
    gain = float(np.sqrt(p_speech / (p_bg * 10.0 ** (spec.snr_db / 10.0))))
    scaled = gain * clip
    clean = speech.samples
    mix = clean + scaled

    norm_scale = 1.0
    peak = float(np.max(np.abs(mix)))
    if peak > 1.0:
        norm_scale = 1.0 / peak
        mix, clean, scaled = mix * norm_scale, clean * norm_scale, scaled * norm_scale

    rate = speech.sample_rate_hz
    return TrainingExample(
        mix=Waveform(mix, rate),
        clean_speech=Waveform(clean, rate),
        background=Waveform(scaled, rate),
        speaker_id=speaker_id,
        mix_spec=spec,
        gain=gain,
        norm_scale=norm_scale,
    )


def sample_mixes(speech_manifest: Manifest, background_manifest: Manifest, n: int,
                 snr_range: Tuple[float, float] = (0.0, 10.0), seed: int = 0,
                 lengths: Optional[Mapping[str, int]] = None) -> List[MixSpec]:
    """
    Draw ``n`` mixture recipes.

    Speech and background records are drawn uniformly with replacement and
    the SNR uniformly over ``snr_range``. When ``lengths`` (sample counts by
    utterance id) is given, the background offset is drawn uniformly over
    the positions that fit the speech.

    Raises:
        DataError: If a manifest is empty (and ``n`` > 0) or holds records
            of the wrong kind.
    """
    if n < 0:
        raise DataError(f"n must be >= 0, got {n}")
    if n == 0:
        return []
    if not len(speech_manifest) or not len(background_manifest):
        raise DataError("cannot sample mixtures from an empty manifest")
    speech_manifest.require_kind(SPEECH)
    background_manifest.require_kind(BACKGROUND)
    lo, hi = snr_range
    if lo > hi:
        raise DataError(f"invalid SNR range {snr_range}")

    rng = np.random.default_rng(seed)
    specs = []
    for _ in range(n):
        speech = speech_manifest.records[int(rng.integers(len(speech_manifest)))]
        bg = background_manifest.records[int(rng.integers(len(background_manifest)))]
        snr = float(rng.uniform(lo, hi))
        offset = 0
        if lengths is not None:
            slack = lengths[bg.utterance_id] - lengths[speech.utterance_id]
            offset = int(rng.integers(0, max(slack, 0) + 1))
        specs.append(MixSpec(
            speech_id=speech.utterance_id,
            background_id=bg.utterance_id,
            snr_db=snr,
            background_offset=offset,
            rng_seed=int(rng.integers(0, 2 ** 31 - 1)),
        ))
    return specs


# ---------------------------------------------------------------------------
# Mixture sets on disk
# ---------------------------------------------------------------------------

def build_mixture_set(speech_manifest: Manifest, background_manifest: Manifest, n: int,
                      out_dir: str, data_cfg: DataConfig, seed: int = 0,
                      snr_range: Optional[Tuple[float, float]] = None) -> str:
    """
    Sample, mix and write ``n`` mixtures with their references.

    Output is byte-identical for identical inputs and seed.

    Returns:
        Path of the mixture manifest.
    """
    snr_range = snr_range or (data_cfg.snr_min, data_cfg.snr_max)
    lengths = {r.utterance_id: sf.info(r.audio_path).frames
               for r in list(speech_manifest) + list(background_manifest)}
    specs = sample_mixes(speech_manifest, background_manifest, n, snr_range, seed, lengths)

    cache: Dict[str, Waveform] = {}

    def load(record: ManifestRecord) -> Waveform:
        if record.utterance_id not in cache:
            cache[record.utterance_id] = read_wav(record.audio_path)
        return cache[record.utterance_id]

    records = []
    for i, spec in enumerate(specs):
        speech_rec = speech_manifest.get(spec.speech_id)
        example = mix_at_snr(
            load(speech_rec), load(background_manifest.get(spec.background_id)), spec,
            speaker_id=speech_rec.speaker_id,
            allow_wrap=data_cfg.allow_wrap,
            silence_threshold=data_cfg.silence_threshold,
            snr_range=snr_range,
        )
        mix_id = f"mix_{i:05d}"
        rel = {kind: os.path.join(kind, f"{mix_id}.wav") for kind in ("mix", "speech", "background")}
        write_wav(example.mix, os.path.join(out_dir, rel["mix"]))
        write_wav(example.clean_speech, os.path.join(out_dir, rel["speech"]))
        write_wav(example.background, os.path.join(out_dir, rel["background"]))
        atomic_write_json(os.path.join(out_dir, "mixspec", f"{mix_id}.mixspec.json"), spec.to_dict())
        records.append(MixtureRecord(
            utterance_id=mix_id,
            mix_path=rel["mix"],
            speech_path=rel["speech"],
            background_path=rel["background"],
            speaker_id=example.speaker_id,
            mix_spec=spec,
            gain=example.gain,
            norm_scale=example.norm_scale,
        ))
        logger.debug("[Mix] %s: %s + %s at %.2f dB", mix_id, spec.speech_id, spec.background_id, spec.snr_db)

    manifest_path = os.path.join(out_dir, MIXTURE_MANIFEST)
    write_mixture_manifest(records, manifest_path)
    logger.info("[Mix] wrote %d mixtures to %s", len(records), out_dir)
    return manifest_path


def write_mixture_manifest(records: Sequence[MixtureRecord], path: str) -> None:
    def write(f):
        for record in records:
            f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
    atomic_write(path, write)


def read_mixture_manifest(path: str) -> List[MixtureRecord]:
    """
    Read a mixture manifest, resolving paths against its directory.

    Raises:
        FileNotFoundError: If the manifest does not exist.
        DataError: On malformed lines or missing reference paths.
    """
    base_dir = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = MixtureRecord.from_dict(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{line_no}: invalid JSON ({e})")
            for attr in ("mix_path", "speech_path", "background_path"):
                value = getattr(record, attr)
                if not os.path.isabs(value):
                    setattr(record, attr, os.path.normpath(os.path.join(base_dir, value)))
            records.append(record)
    return records


def load_examples(mixture_manifest: str) -> List[TrainingExample]:
    """
    Rebuild TrainingExamples from a mixture set.

    Raises:
        DataError: If a referenced WAV file is missing.
    """
    examples = []
    for record in read_mixture_manifest(mixture_manifest):
        for attr in ("mix_path", "speech_path", "background_path"):
            if not os.path.exists(getattr(record, attr)):
                raise DataError(f"'{record.utterance_id}': missing reference file {getattr(record, attr)}")
        examples.append(TrainingExample(
            mix=read_wav(record.mix_path),
            clean_speech=read_wav(record.speech_path),
            background=read_wav(record.background_path),
            speaker_id=record.speaker_id,
            mix_spec=record.mix_spec,
            gain=record.gain,
            norm_scale=record.norm_scale,
        ))
    return examples


# ---------------------------------------------------------------------------
# Toy corpus
# ---------------------------------------------------------------------------

# f0 ranges in Hz per toy speaker
TOY_SPEAKERS = {"spk_low": (95.0, 135.0), "spk_high": (190.0, 250.0)}
# Chord roots in Hz for the toy backgrounds
TOY_CHORDS = [(220.0, 277.2, 329.6), (261.6, 329.6, 392.0), (293.7, 370.0, 440.0), (196.0, 246.9, 293.7)]


def _toy_speech(rng: np.random.Generator, f0_range: Tuple[float, float], n: int) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE_HZ
    f0 = rng.uniform(*f0_range)
    vibrato = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(4.0, 6.0) * t)
    phase = 2 * np.pi * np.cumsum(f0 * vibrato) / SAMPLE_RATE_HZ
    formants = rng.uniform([500, 1400], [800, 2200])
    signal = np.zeros(n)
    for k in range(1, 25):
        freq = k * f0
        if freq > 7000:
            break
        weight = sum(np.exp(-((freq - fc) / 250.0) ** 2) for fc in formants) + 0.3 / k
        signal += weight * np.sin(k * phase)
    # syllable-rate envelope with short pauses
    syllables = np.clip(np.sin(2 * np.pi * rng.uniform(3.0, 5.0) * t + rng.uniform(0, np.pi)), 0.0, None)
    signal *= syllables ** 0.5
    return 0.5 * signal / np.max(np.abs(signal))


def _toy_background(rng: np.random.Generator, chord: Tuple[float, ...], n: int) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE_HZ
    signal = sum(np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) for f in chord)
    beat = int(SAMPLE_RATE_HZ * rng.uniform(0.2, 0.3))
    decay = np.exp(-np.arange(beat) / (0.03 * SAMPLE_RATE_HZ))
    hits = np.zeros(n)
    for start in range(0, n, beat):
        length = min(beat, n - start)
        hits[start:start + length] = rng.standard_normal(length) * decay[:length]
    signal = signal + 1.5 * hits
    return 0.5 * signal / np.max(np.abs(signal))


def build_toy_corpus(out_dir: str, seed: int = 0, n_utterances: int = 8, n_backgrounds: int = 4,
                     speech_seconds: float = 1.5, background_seconds: float = 2.5) -> Tuple[str, str]:
    """
    Write a synthetic corpus: harmonic "speech" from two speakers with
    distinct pitch ranges, and music-like backgrounds (chords plus
    percussive noise bursts).

    Returns:
        (speech_manifest_path, background_manifest_path)
    """
    rng = np.random.default_rng(seed)
    speakers = sorted(TOY_SPEAKERS)
    n_speech = int(speech_seconds * SAMPLE_RATE_HZ)
    n_bg = int(background_seconds * SAMPLE_RATE_HZ)

    speech_records = []
    for i in range(n_utterances):
        speaker = speakers[i % len(speakers)]
        rel = os.path.join("speech", f"utt_{i:03d}.wav")
        write_wav(Waveform(_toy_speech(rng, TOY_SPEAKERS[speaker], n_speech)), os.path.join(out_dir, rel))
        speech_records.append(ManifestRecord(f"utt_{i:03d}", rel, speaker, SPEECH))

    bg_records = []
    for i in range(n_backgrounds):
        rel = os.path.join("background", f"bg_{i:03d}.wav")
        chord = TOY_CHORDS[i % len(TOY_CHORDS)]
        write_wav(Waveform(_toy_background(rng, chord, n_bg)), os.path.join(out_dir, rel))
        bg_records.append(ManifestRecord(f"bg_{i:03d}", rel, "", BACKGROUND))

    speech_path = os.path.join(out_dir, "speech.jsonl")
    bg_path = os.path.join(out_dir, "background.jsonl")
    Manifest(speech_records).save_jsonl(speech_path)
    Manifest(bg_records).save_jsonl(bg_path)
    logger.info("[Toy] %d utterances, %d backgrounds in %s", n_utterances, n_backgrounds, out_dir)
    return speech_path, bg_path


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """
    Cropped, stacked training tensors.

    Waveforms are (B, n); spectrograms complex (B, T, F); mels log-scaled
    (B, T, n_mels).
    """
    mix: torch.Tensor
    speech: torch.Tensor
    background: torch.Tensor
    mix_spec: torch.Tensor
    speech_spec: torch.Tensor
    background_spec: torch.Tensor
    mix_mel: torch.Tensor
    speech_mel: torch.Tensor
    speaker_ids: List[str]
    utterance_ids: List[str] = field(default_factory=list)
    offsets: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.speaker_ids)


def _crop(samples: np.ndarray, start: int, length: int) -> np.ndarray:
    piece = samples[start:start + length]
    if len(piece) < length:
        piece = np.pad(piece, (0, length - len(piece)))
    return piece


def make_batch(examples: Sequence[TrainingExample], frame_params: FrameParams, mel_params: MelParams,
               crop_samples: Optional[int] = None, rng: Optional[np.random.Generator] = None,
               pad_short: bool = True, dtype: torch.dtype = torch.float32) -> Batch:
    """
    Stack random fixed-length crops of ``examples``.

    Examples shorter than the crop are zero-padded at the tail when
    ``pad_short`` is set. ``crop_samples=None`` keeps full lengths (padding
    to the longest example).

    Raises:
        DataError: On mixed sample rates, an empty example list, or a crop
            longer than an example with padding disabled.
    """
    if not examples:
        raise DataError("cannot build a batch from zero examples")
    rates = {ex.mix.sample_rate_hz for ex in examples}
    if len(rates) != 1:
        raise DataError(f"examples mix sample rates {sorted(rates)}")
    rng = rng or np.random.default_rng(0)
    length = crop_samples or max(len(ex.mix) for ex in examples)

    mixes, speeches, backgrounds, offsets = [], [], [], []
    for ex in examples:
        n = len(ex.mix)
        if n < length and not pad_short:
            raise DataError(f"crop of {length} samples exceeds '{ex.utterance_id}' ({n} samples)")
        start = int(rng.integers(0, n - length + 1)) if n > length else 0
        offsets.append(start)
        mixes.append(_crop(ex.mix.samples, start, length))
        speeches.append(_crop(ex.clean_speech.samples, start, length))
        backgrounds.append(_crop(ex.background.samples, start, length))

    waves = [torch.as_tensor(np.stack(x), dtype=dtype) for x in (mixes, speeches, backgrounds)]
    specs = [stft_tensor(w, frame_params) for w in waves]
    return Batch(
        mix=waves[0],
        speech=waves[1],
        background=waves[2],
        mix_spec=specs[0],
        speech_spec=specs[1],
        background_spec=specs[2],
        mix_mel=mel_from_bins(specs[0], frame_params, mel_params, log_scale=True),
        speech_mel=mel_from_bins(specs[1], frame_params, mel_params, log_scale=True),
        speaker_ids=[ex.speaker_id for ex in examples],
        utterance_ids=[ex.utterance_id for ex in examples],
        offsets=offsets,
    )


def batch_for_step(examples: Sequence[TrainingExample], step: int, data_cfg: DataConfig,
                   frame_params: FrameParams, mel_params: MelParams, seed: int = 0) -> Batch:
    """
    The batch used at ``step``: a function of (seed, step) only, so a resumed
    run sees the same batches as an uninterrupted one.
    """
    rng = np.random.default_rng([seed, step])
    size = min(data_cfg.batch_size, len(examples))
    picks = rng.choice(len(examples), size=size, replace=False)
    crop = int(round(data_cfg.crop_seconds * SAMPLE_RATE_HZ))
    return make_batch([examples[i] for i in picks], frame_params, mel_params, crop, rng, data_cfg.pad_short)
