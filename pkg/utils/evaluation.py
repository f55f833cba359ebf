"""
Objective evaluation: SI-SDR of separated speech and separated background
against their references, an optional external PESQ-style scorer, and the
CSV / JSON / Excel report files.
"""

import logging
import math
import os
import shlex
import subprocess
import tempfile
from typing import Callable, Optional, Tuple, Union

import numpy as np

from models.data_models import BACKGROUND, SPEECH, EvalReport, EvalRow, MixtureRecord, Waveform, is_finite_number
from models.separator import separate_wave
from utils.dsp import mel_spectrogram, read_wav, write_wav
from utils.errors import DataError
from utils.mixing import read_mixture_manifest
from utils.pipeline import PipelineModels, convert_parts, upper_bound_parts
from utils.report_export import export_report
from utils.training import load_models

logger = logging.getLogger(__name__)

SI_SDR_CAP_DB = 100.0
REPORT_FILES = ("report.csv", "report.json", "report.xlsx")

Signal = Union[Waveform, np.ndarray]
SeparateFn = Callable[[Waveform, MixtureRecord], Tuple[Waveform, Waveform]]


def _samples(x: Signal) -> np.ndarray:
    return np.asarray(x.samples if isinstance(x, Waveform) else x, dtype=np.float64)


def si_sdr(est: Signal, ref: Signal, cap_db: Optional[float] = SI_SDR_CAP_DB) -> float:
    """
    Scale-invariant signal-to-distortion ratio in dB.

    The estimate is projected onto the reference,
    ``s_target = (<est, ref> / ||ref||^2) * ref``, and the ratio
    ``||s_target||^2 / ||est - s_target||^2`` is returned in dB.

    Args:
        est: Estimated signal.
        ref: Reference signal of the same length.
        cap_db: Values are clipped to [-cap_db, cap_db]; None returns the
            raw value, +inf when the residual is exactly zero.

    Raises:
        ValueError: On a length mismatch.
        DataError: On a silent reference.
    """
    e = _samples(est)
    r = _samples(ref)
    if e.shape != r.shape:
        raise ValueError(f"length mismatch: estimate {e.shape} vs reference {r.shape}")
    ref_energy = float(np.dot(r, r))
    if ref_energy <= 0.0:
        raise DataError("SI-SDR is undefined for a silent reference")
    target = (np.dot(e, r) / ref_energy) * r
    noise = e - target
    target_energy = float(np.dot(target, target))
    noise_energy = float(np.dot(noise, noise))
    if target_energy == 0.0:
        value = -math.inf
    elif noise_energy == 0.0:
        value = math.inf
    else:
        value = 10.0 * math.log10(target_energy / noise_energy)
    if cap_db is None:
        return value
    return float(min(max(value, -cap_db), cap_db))


class ExternalScorer:
    """
    Plug-in for a perceptual scorer that runs outside this package.

    The command is invoked as ``<command> ref.wav est.wav`` and must print a
    single number on stdout.
    """

    def __init__(self, command: str, timeout: float = 120.0):
        self.argv = shlex.split(command)
        if not self.argv:
            raise ValueError("external scorer command is empty")
        self.timeout = timeout

    def score(self, ref: Waveform, est: Waveform) -> float:
        """
        Raises:
            DataError: If the command fails or prints something that is not a number.
        """
        with tempfile.TemporaryDirectory() as tmp:
            ref_path = os.path.join(tmp, "ref.wav")
            est_path = os.path.join(tmp, "est.wav")
            write_wav(ref, ref_path)
            write_wav(est, est_path)
            try:
                result = subprocess.run(self.argv + [ref_path, est_path], capture_output=True,
                                        text=True, timeout=self.timeout, check=True)
            except (OSError, subprocess.SubprocessError) as e:
                raise DataError(f"external scorer '{self.argv[0]}' failed: {e}")
        try:
            value = float(result.stdout.strip().split()[-1])
        except (ValueError, IndexError):
            raise DataError(f"external scorer printed no number: {result.stdout!r}")
        if not is_finite_number(value):
            raise DataError(f"external scorer returned {value}")
        return value


def oracle_separation(mix: Waveform, record: MixtureRecord) -> Tuple[Waveform, Waveform]:
    """Return the references themselves as the estimates."""
    return read_wav(record.speech_path), read_wav(record.background_path)


def _mel_frames(w: Waveform, models: PipelineModels) -> np.ndarray:
    audio = models.extractor.module.audio
    return mel_spectrogram(w, audio.mel, audio.frame, log_scale=True).frames.numpy()


def write_report(report: EvalReport, out_dir: str) -> None:
    """Write ``report.csv``, ``report.json`` and ``report.xlsx`` into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    report.save_csv(os.path.join(out_dir, "report.csv"))
    report.save_json(os.path.join(out_dir, "report.json"))
    if report.rows:
        export_report(report, os.path.join(out_dir, "report.xlsx"))


def evaluate_system(checkpoint: Optional[str], eval_manifest: str, out_dir: str,
                    system: Optional[str] = None, models: Optional[PipelineModels] = None,
                    separate_fn: Optional[SeparateFn] = None, target_speaker: Optional[str] = None,
                    scorer: Optional[ExternalScorer] = None, cap_db: float = SI_SDR_CAP_DB,
                    upper_bound: bool = False) -> EvalReport:
    """
    Score one system on every mixture of ``eval_manifest``.

    Separated speech is scored against the clean speech and separated
    background against the background reference, each before any
    superimposing. With ``target_speaker`` the separated speech is also
    converted and the mel L1 distance of the converted speech to the clean
    source is recorded as a diagnostic.

    Args:
        checkpoint: Training checkpoint to load (ignored when ``models`` or
            ``separate_fn`` is given).
        eval_manifest: Mixture manifest (mix, clean speech, background triples).
        out_dir: Directory for the report files.
        system: Name of the system in the report (defaults to the
            checkpoint file stem).
        models: Already loaded pipeline models.
        separate_fn: Replaces the separator; receives the mixture and its
            record and returns (speech, background) estimates.
        target_speaker: Convert to this speaker for the mel diagnostic.
        scorer: Optional external scorer for the PESQ column.
        cap_db: SI-SDR reporting cap.
        upper_bound: Score the reference system instead: the clean source
            speech is converted (to ``target_speaker``, else to the
            record's own speaker) and the original background added back.
            Separation rows then use the references themselves.

    Returns:
        The report, also written as CSV, JSON and XLSX.

    Raises:
        DataError: If a reference file is missing.
        CheckpointError: If the checkpoint cannot be loaded.
    """
    if upper_bound and separate_fn is not None:
        raise ValueError("upper_bound and separate_fn are mutually exclusive")
    if models is None and separate_fn is None:
        if checkpoint is None:
            raise ValueError("need a checkpoint, loaded models or a separate_fn")
        models, _ = load_models(checkpoint)
    if system is None and upper_bound:
        system = "upper_bound"
    elif system is None:
        system = os.path.splitext(os.path.basename(checkpoint))[0] if checkpoint else "oracle"

    records = read_mixture_manifest(eval_manifest)
    report = EvalReport()
    for index, record in enumerate(records):
        for attr in ("mix_path", "speech_path", "background_path"):
            if not os.path.exists(getattr(record, attr)):
                raise DataError(f"'{record.utterance_id}': missing reference file {getattr(record, attr)}")
        mix = read_wav(record.mix_path)
        speech_ref = read_wav(record.speech_path)
        background_ref = read_wav(record.background_path)

        mel_l1 = None
        parts = None
        if upper_bound:
            parts = upper_bound_parts(speech_ref, background_ref, target_speaker or record.speaker_id, models)
            speech_est, background_est = parts.speech, parts.background
            mel_l1 = float(np.mean(np.abs(_mel_frames(parts.converted, models) - _mel_frames(speech_ref, models))))
        elif separate_fn is not None:
            speech_est, background_est = separate_fn(mix, record)
        elif target_speaker is not None and models.vc is not None:
            parts = convert_parts(mix, target_speaker, models)
            speech_est, background_est = parts.speech, parts.background
            mel_l1 = float(np.mean(np.abs(_mel_frames(parts.converted, models) - _mel_frames(speech_ref, models))))
        else:
            speech_est, background_est = separate_wave(mix, models.separator)

        for target, est, ref in ((SPEECH, speech_est, speech_ref), (BACKGROUND, background_est, background_ref)):
            report.rows.append(EvalRow(
                system=system,
                utterance_id=record.utterance_id,
                target=target,
                si_sdr_db=si_sdr(est, ref, cap_db),
                pesq=scorer.score(ref, est) if scorer is not None else None,
                mel_l1=mel_l1 if target == SPEECH else None,
            ))

        if index == 0 and models is not None:
            report.panels = {
                "mix": _mel_frames(mix, models),
                "separated_speech": _mel_frames(speech_est, models),
                "separated_background": _mel_frames(background_est, models),
            }
            if parts is not None:
                report.panels["converted"] = _mel_frames(parts.converted, models)
                report.panels["recomposed"] = _mel_frames(parts.output, models)

    write_report(report, out_dir)
    for agg in report.aggregate():
        logger.info("[Eval] %s %s: SI-SDR %.2f dB over %d utterances",
                    agg.system, agg.target, agg.si_sdr_db, len(records))
    return report


def unprocessed_report(eval_manifest: str, cap_db: float = SI_SDR_CAP_DB) -> EvalReport:
    """SI-SDR of the raw mixture against each reference (the no-separation baseline)."""
    report = EvalReport()
    for record in read_mixture_manifest(eval_manifest):
        mix = read_wav(record.mix_path)
        for target, path in ((SPEECH, record.speech_path), (BACKGROUND, record.background_path)):
            report.rows.append(EvalRow("mixture", record.utterance_id, target, si_sdr(mix, read_wav(path), cap_db)))
    return report
