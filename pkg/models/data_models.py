"""
Data models for the background-preserving voice conversion pipeline.

This module defines dataclass-based models for:
- Waveform: mono 16 kHz audio, the I/O currency of every module.
- ComplexSpectrogram / MelSpectrogram / ComplexRatioMask: time-frequency data.
- SeparationOutput: the two masks and two source estimates of the separator.
- BottleneckFeatures: frame-rate linguistic features from the frozen extractor.
- ManifestRecord / Manifest: corpus manifests stored as JSON-lines.
- MixSpec / TrainingExample / MixtureRecord: SNR-controlled mixtures.
- LossBreakdown: per-step named loss terms for the training log.
- EvalRow / EvalReport: objective evaluation results.
"""

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, IO, Iterator, List, Optional

import numpy as np
import torch

from models.config import FrameParams, MelParams, SAMPLE_RATE_HZ
from utils.errors import DataError

# Schema version of every JSON / JSON-lines file written by the tool; bump when
# a saved format changes in a breaking way
_SCHEMA_VERSION = 1

SPEECH = "speech"
BACKGROUND = "background"


def atomic_write(file_path: str, write_fn: Callable[[IO], None], binary: bool = False) -> None:
    """
    Write a file atomically: write to a sibling temp file, then ``os.replace``.

    A crash mid-write never leaves a truncated file behind; the target is only
    replaced once the new content is complete.

    Args:
        file_path: Destination path (its directory is created if missing).
        write_fn: Callback receiving the open temp file.
        binary: Open the temp file in binary mode.
    """
    target_dir = os.path.dirname(os.path.abspath(file_path))
    os.makedirs(target_dir, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=target_dir, suffix=".tmp")
    try:
        if binary:
            with os.fdopen(fd, "wb") as f:
                write_fn(f)
        else:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
                write_fn(f)
        os.replace(tmp_path, file_path)
    except Exception:
        try:
            os.unlink(tmp_path)
        except OSError:
            pass
        raise


def atomic_write_json(file_path: str, data: Any) -> None:
    """Atomically write ``data`` as indented, key-sorted JSON."""
    atomic_write(
        file_path,
        lambda f: json.dump(data, f, indent=2, ensure_ascii=False, sort_keys=True),
    )


def _check_version(data: Dict[str, Any], what: str) -> None:
    saved_version = data.get("version", 1)
    if saved_version > _SCHEMA_VERSION:
        raise DataError(
            f"{what} was written by a newer version of this tool "
            f"(file version {saved_version}, current version {_SCHEMA_VERSION})."
        )


@dataclass
class Waveform:
    """
    Mono sampled audio.

    Attributes:
        samples: 1-D float array, nominally in [-1, 1].
        sample_rate_hz: Sampling rate; 16000 everywhere in the pipeline.
    """
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        if isinstance(self.samples, torch.Tensor):
            self.samples = self.samples.detach().cpu().numpy()
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError(f"Waveform must be mono (1-D), got shape {self.samples.shape}")
        if self.sample_rate_hz <= 0:
            raise DataError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("Waveform contains non-finite samples")

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate_hz

    def power(self) -> float:
        """Mean squared amplitude over the whole waveform."""
        return float(np.mean(self.samples ** 2)) if len(self) else 0.0

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.samples, dtype=dtype)


@dataclass
class ComplexSpectrogram:
    """
    STFT of a waveform.

    Attributes:
        bins: Complex tensor shaped (..., T, F) with F = fft_size // 2 + 1.
        frame_params: Analysis parameters; required by istft.
        length: Number of samples of the analysed waveform.
    """
    bins: torch.Tensor
    frame_params: Optional[FrameParams]
    length: int

    @property
    def shape(self):
        return tuple(self.bins.shape)


@dataclass
class MelSpectrogram:
    """
    Mel analysis of a waveform.

    Attributes:
        frames: Real tensor shaped (..., T, n_mels); linear magnitudes, or
            natural-log magnitudes floored at ``mel_params.log_floor``.
        mel_params: Filterbank parameters.
    """
    frames: torch.Tensor
    mel_params: MelParams

    @property
    def shape(self):
        return tuple(self.frames.shape)


@dataclass
class ComplexRatioMask:
    """Complex mask shaped like the spectrogram it is applied to."""
    mask: torch.Tensor

    @property
    def shape(self):
        return tuple(self.mask.shape)


@dataclass
class SeparationOutput:
    """Both estimated masks and the masked mixture for each source."""
    crm_speech: ComplexRatioMask
    crm_background: ComplexRatioMask
    est_speech: ComplexSpectrogram
    est_background: ComplexSpectrogram


@dataclass
class BottleneckFeatures:
    """
    Linguistic feature sequence.

    Attributes:
        frames: Real tensor shaped (t, d).
        subsample_factor: Mel frames per feature frame.
    """
    frames: torch.Tensor
    subsample_factor: int

    @property
    def dim(self) -> int:
        return int(self.frames.shape[-1])

    def __len__(self) -> int:
        return int(self.frames.shape[-2])


@dataclass
class ManifestRecord:
    """One corpus entry: an utterance (speech) or a background clip."""
    utterance_id: str
    audio_path: str
    speaker_id: str = ""
    kind: str = SPEECH

    def to_dict(self) -> Dict[str, Any]:
        return {
            "utterance_id": self.utterance_id,
            "audio_path": self.audio_path,
            "speaker_id": self.speaker_id,
            "kind": self.kind,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ManifestRecord":
        return cls(
            utterance_id=data.get("utterance_id", ""),
            audio_path=data.get("audio_path", ""),
            speaker_id=data.get("speaker_id", ""),
            kind=data.get("kind", SPEECH),
        )


@dataclass
class Manifest:
    """
    A list of corpus records with unique utterance ids.

    Stored as JSON-lines, one record per line. Relative audio paths are
    resolved against the manifest's directory when loaded.
    """
    records: List[ManifestRecord] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for record in self.records:
            if record.utterance_id in seen:
                raise DataError(f"Duplicate utterance_id '{record.utterance_id}' in manifest")
            if record.kind not in (SPEECH, BACKGROUND):
                raise DataError(
                    f"Record '{record.utterance_id}' has kind '{record.kind}', "
                    f"expected '{SPEECH}' or '{BACKGROUND}'"
                )
            seen.add(record.utterance_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    def get(self, utterance_id: str) -> Optional[ManifestRecord]:
        for record in self.records:
            if record.utterance_id == utterance_id:
                return record
        return None

    def require_kind(self, kind: str) -> "Manifest":
        """Raise DataError unless every record is of ``kind``."""
        wrong = [r.utterance_id for r in self.records if r.kind != kind]
        if wrong:
            raise DataError(f"Expected only '{kind}' records, found others: {wrong[:5]}")
        return self

    def speakers(self) -> List[str]:
        return sorted({r.speaker_id for r in self.records if r.kind == SPEECH})

    def save_jsonl(self, file_path: str) -> None:
        def write(f):
            for record in self.records:
                f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
        atomic_write(file_path, write)

    @classmethod
    def load_jsonl(cls, file_path: str, check_paths: bool = True) -> "Manifest":
        """
        Load a manifest.

        Raises:
            FileNotFoundError: If the manifest does not exist.
            DataError: On malformed lines, duplicate ids, or missing audio files.
        """
        base_dir = os.path.dirname(os.path.abspath(file_path))
        records = []
        with open(file_path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    record = ManifestRecord.from_dict(json.loads(line))
                except json.JSONDecodeError as e:
                    raise DataError(f"{file_path}:{line_no}: invalid JSON ({e})")
                if not os.path.isabs(record.audio_path):
                    record.audio_path = os.path.normpath(os.path.join(base_dir, record.audio_path))
                if check_paths and not os.path.exists(record.audio_path):
                    raise DataError(f"{file_path}:{line_no}: audio file not found: {record.audio_path}")
                records.append(record)
        return cls(records)


@dataclass
class MixSpec:
    """
    Recipe for one mixture.

    Attributes:
        speech_id: Utterance id of the speech record.
        background_id: Utterance id of the background record.
        snr_db: Target speech-to-background ratio in dB.
        background_offset: First background sample used.
        rng_seed: Seed reserved for any per-mixture randomness.
    """
    speech_id: str
    background_id: str
    snr_db: float
    background_offset: int = 0
    rng_seed: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": _SCHEMA_VERSION,
            "speech_id": self.speech_id,
            "background_id": self.background_id,
            "snr_db": self.snr_db,
            "background_offset": self.background_offset,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MixSpec":
        _check_version(data, "MixSpec")
        return cls(
            speech_id=data.get("speech_id", ""),
            background_id=data.get("background_id", ""),
            snr_db=float(data.get("snr_db", 0.0)),
            background_offset=int(data.get("background_offset", 0)),
            rng_seed=int(data.get("rng_seed", 0)),
        )


@dataclass
class TrainingExample:
    """
    A mixture with its references.

    ``mix == clean_speech + background`` sample-wise, where ``background`` is
    already clipped and scaled by ``gain``. When the mixture had to be
    peak-normalized, all three signals carry the same ``norm_scale``.
    """
    mix: Waveform
    clean_speech: Waveform
    background: Waveform
    speaker_id: str
    mix_spec: MixSpec
    gain: float = 1.0
    norm_scale: float = 1.0

    @property
    def utterance_id(self) -> str:
        return self.mix_spec.speech_id


@dataclass
class MixtureRecord:
    """One line of a mixture manifest (the on-disk form of a TrainingExample)."""
    utterance_id: str
    mix_path: str
    speech_path: str
    background_path: str
    speaker_id: str
    mix_spec: MixSpec
    gain: float = 1.0
    norm_scale: float = 1.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "utterance_id": self.utterance_id,
            "mix_path": self.mix_path,
            "speech_path": self.speech_path,
            "background_path": self.background_path,
            "speaker_id": self.speaker_id,
            "mix_spec": self.mix_spec.to_dict(),
            "gain": self.gain,
            "norm_scale": self.norm_scale,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MixtureRecord":
        missing = [k for k in ("mix_path", "speech_path", "background_path") if not data.get(k)]
        if missing:
            raise DataError(
                f"Mixture record '{data.get('utterance_id', '?')}' is missing references: {missing}"
            )
        return cls(
            utterance_id=data.get("utterance_id", ""),
            mix_path=data["mix_path"],
            speech_path=data["speech_path"],
            background_path=data["background_path"],
            speaker_id=data.get("speaker_id", ""),
            mix_spec=MixSpec.from_dict(data.get("mix_spec", {})),
            gain=float(data.get("gain", 1.0)),
            norm_scale=float(data.get("norm_scale", 1.0)),
        )


@dataclass
class LossBreakdown:
    """
    Named scalar loss terms of one training step.

    Known term names: rec_uni, ss_s, ss_b, rec_vc, adv_gen, adv_dis, fm, total.
    Terms switched off by a stage or an ablation are absent, not zero.
    """
    terms: Dict[str, float] = field(default_factory=dict)
    step: int = 0
    stage: str = ""

    def __getitem__(self, name: str) -> float:
        return self.terms[name]

    def __contains__(self, name: str) -> bool:
        return name in self.terms

    def keys(self):
        return self.terms.keys()

    @property
    def total(self) -> float:
        return self.terms["total"]

    def to_dict(self) -> Dict[str, Any]:
        return {"step": self.step, "stage": self.stage, "terms": dict(self.terms)}

    def to_json_line(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LossBreakdown":
        return cls(
            terms={k: float(v) for k, v in data.get("terms", {}).items()},
            step=int(data.get("step", 0)),
            stage=data.get("stage", ""),
        )


def read_loss_log(file_path: str) -> List[LossBreakdown]:
    """Read a JSON-lines training log."""
    with open(file_path, "r", encoding="utf-8") as f:
        return [LossBreakdown.from_dict(json.loads(line)) for line in f if line.strip()]


@dataclass
class EvalRow:
    """
    One scored signal.

    Attributes:
        system: Name of the evaluated system (checkpoint or ablation variant).
        utterance_id: Mixture id ("ALL" for aggregate rows).
        target: "speech" or "background".
        si_sdr_db: SI-SDR in dB, capped for reporting.
        pesq: Score from an external scorer, if one is plugged in.
        mel_l1: Conversion-side mel distance diagnostic, if conversion ran.
    """
    system: str
    utterance_id: str
    target: str
    si_sdr_db: float
    pesq: Optional[float] = None
    mel_l1: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "system": self.system,
            "utterance_id": self.utterance_id,
            "target": self.target,
            "si_sdr_db": self.si_sdr_db,
            "pesq": self.pesq,
            "mel_l1": self.mel_l1,
        }


CSV_COLUMNS = ["system", "utterance_id", "target", "si_sdr_db", "pesq", "mel_l1"]


@dataclass
class EvalReport:
    """
    Per-utterance rows plus aggregate means, per system and target.

    ``panels`` optionally holds mel arrays of one example for figure emission;
    it is not part of the CSV / JSON report.
    """
    rows: List[EvalRow] = field(default_factory=list)
    panels: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def has_pesq(self) -> bool:
        return any(r.pesq is not None for r in self.rows)

    @property
    def has_mel_l1(self) -> bool:
        return any(r.mel_l1 is not None for r in self.rows)

    def systems(self) -> List[str]:
        return list(dict.fromkeys(r.system for r in self.rows))

    def aggregate(self) -> List[EvalRow]:
        """Mean of the per-utterance values for each (system, target)."""
        out = []
        for system in self.systems():
            for target in (SPEECH, BACKGROUND):
                rows = [r for r in self.rows if r.system == system and r.target == target]
                if not rows:
                    continue
                pesq = [r.pesq for r in rows if r.pesq is not None]
                mel = [r.mel_l1 for r in rows if r.mel_l1 is not None]
                out.append(EvalRow(
                    system=system,
                    utterance_id="ALL",
                    target=target,
                    si_sdr_db=float(np.mean([r.si_sdr_db for r in rows])),
                    pesq=float(np.mean(pesq)) if pesq else None,
                    mel_l1=float(np.mean(mel)) if mel else None,
                ))
        return out

    def summary_table(self) -> List[Dict[str, Any]]:
        """One row per system in the speech / background objective-table layout."""
        table = []
        for system in self.systems():
            entry = {"system": system}
            for agg in self.aggregate():
                if agg.system != system:
                    continue
                entry[f"{agg.target}_si_sdr_db"] = agg.si_sdr_db
                entry[f"{agg.target}_pesq"] = agg.pesq
            table.append(entry)
        return table

    def merged(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(rows=self.rows + other.rows, panels=self.panels or other.panels)

    def columns(self) -> List[str]:
        columns = CSV_COLUMNS[:4]
        if self.has_pesq:
            columns.append("pesq")
        if self.has_mel_l1:
            columns.append("mel_l1")
        return columns

    def save_csv(self, file_path: str) -> None:
        """Write per-utterance rows followed by aggregate rows."""
        columns = self.columns()

        def write(f):
            writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
            writer.writeheader()
            for row in self.rows + self.aggregate():
                writer.writerow({k: v for k, v in row.to_dict().items() if k in columns})
        atomic_write(file_path, write)

    def to_dict(self) -> Dict[str, Any]:
        columns = self.columns()
        strip = lambda r: {k: v for k, v in r.to_dict().items() if k in columns}
        return {
            "version": _SCHEMA_VERSION,
            "rows": [strip(r) for r in self.rows],
            "aggregate": [strip(r) for r in self.aggregate()],
            "summary": self.summary_table(),
        }

    def save_json(self, file_path: str) -> None:
        atomic_write_json(file_path, self.to_dict())

    @classmethod
    def load_json(cls, file_path: str) -> "EvalReport":
        with open(file_path, "r", encoding="utf-8") as f:
            data = json.load(f)
        _check_version(data, "Report file")
        rows = [
            EvalRow(
                system=r["system"],
                utterance_id=r["utterance_id"],
                target=r["target"],
                si_sdr_db=float(r["si_sdr_db"]),
                pesq=r.get("pesq"),
                mel_l1=r.get("mel_l1"),
            )
            for r in data.get("rows", [])
        ]
        return cls(rows=rows)


def is_finite_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and math.isfinite(value)
