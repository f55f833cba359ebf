"""
Test cases for data models (models/data_models.py).

Tests:
- Waveform validation and helpers
- Manifest loading, duplicate ids, missing files, relative paths
- MixSpec / MixtureRecord serialization and version checks
- LossBreakdown JSON lines
- EvalReport aggregation, summary layout, CSV / JSON files
"""

import csv
import json
import os

import numpy as np
import pytest

from models.data_models import (
    BACKGROUND,
    SPEECH,
    EvalReport,
    EvalRow,
    LossBreakdown,
    Manifest,
    ManifestRecord,
    MixSpec,
    MixtureRecord,
    Waveform,
    atomic_write_json,
    read_loss_log,
)
from utils.errors import DataError


class TestWaveform:
    """Tests for the Waveform model."""

    def test_create(self):
        w = Waveform(np.zeros(160))
        assert len(w) == 160
        assert w.sample_rate_hz == 16000
        assert w.duration == pytest.approx(0.01)

    def test_stereo_rejected(self):
        with pytest.raises(DataError):
            Waveform(np.zeros((2, 100)))

    def test_non_finite_rejected(self):
        with pytest.raises(DataError):
            Waveform(np.array([0.0, np.nan]))

    def test_power(self):
        assert Waveform(np.full(10, 0.5)).power() == pytest.approx(0.25)

    def test_to_tensor_dtype(self):
        import torch
        assert Waveform(np.ones(4)).to_tensor(torch.float64).dtype == torch.float64


class TestManifest:
    """Tests for corpus manifests."""

    def test_duplicate_ids_rejected(self):
        with pytest.raises(DataError):
            Manifest([ManifestRecord("a", "a.wav", "s", SPEECH), ManifestRecord("a", "b.wav", "s", SPEECH)])

    def test_bad_kind_rejected(self):
        with pytest.raises(DataError):
            Manifest([ManifestRecord("a", "a.wav", "s", "noise")])

    def test_save_load_relative_paths(self, temp_dir):
        """Relative audio paths resolve against the manifest directory."""
        open(os.path.join(temp_dir, "a.wav"), "wb").close()
        path = os.path.join(temp_dir, "m.jsonl")
        Manifest([ManifestRecord("a", "a.wav", "spk", SPEECH)]).save_jsonl(path)
        loaded = Manifest.load_jsonl(path)
        assert loaded.records[0].audio_path == os.path.join(temp_dir, "a.wav")
        assert loaded.speakers() == ["spk"]

    def test_missing_audio_file(self, temp_dir):
        path = os.path.join(temp_dir, "m.jsonl")
        Manifest([ManifestRecord("a", "missing.wav", "spk", SPEECH)]).save_jsonl(path)
        with pytest.raises(DataError, match="not found"):
            Manifest.load_jsonl(path)

    def test_require_kind(self):
        m = Manifest([ManifestRecord("a", "a.wav", "", BACKGROUND)])
        with pytest.raises(DataError):
            m.require_kind(SPEECH)

    def test_get(self):
        m = Manifest([ManifestRecord("a", "a.wav", "s", SPEECH)])
        assert m.get("a").speaker_id == "s"
        assert m.get("b") is None


class TestMixSpec:
    """Tests for MixSpec and MixtureRecord serialization."""

    def test_round_trip(self):
        spec = MixSpec("utt", "bg", 3.5, 100, 42)
        assert MixSpec.from_dict(spec.to_dict()) == spec

    def test_newer_version_rejected(self):
        data = MixSpec("utt", "bg", 3.5, 0, 1).to_dict()
        data["version"] = 999
        with pytest.raises(DataError, match="newer version"):
            MixSpec.from_dict(data)

    def test_record_missing_reference(self):
        data = MixtureRecord("m", "mix.wav", "speech.wav", "bg.wav", "s", MixSpec("u", "b", 1.0, 0, 0)).to_dict()
        data["background_path"] = ""
        with pytest.raises(DataError, match="background_path"):
            MixtureRecord.from_dict(data)


class TestLossBreakdown:
    """Tests for the per-step loss record."""

    def test_json_line(self):
        b = LossBreakdown(terms={"rec_uni": 1.5, "total": 67.5}, step=3, stage="joint")
        line = b.to_json_line()
        assert "\n" not in line
        assert LossBreakdown.from_dict(json.loads(line)) == b

    def test_access(self):
        b = LossBreakdown(terms={"ss_s": 1.0, "total": 2.0})
        assert b["ss_s"] == 1.0
        assert "ss_b" not in b
        assert b.total == 2.0

    def test_read_log(self, temp_dir):
        path = os.path.join(temp_dir, "log.jsonl")
        with open(path, "w", encoding="utf-8") as f:
            for step in range(3):
                f.write(LossBreakdown({"total": float(step)}, step, "vc").to_json_line() + "\n")
        log = read_loss_log(path)
        assert [b.step for b in log] == [0, 1, 2]


def _report():
    rows = []
    for i, (s, b) in enumerate([(10.0, 5.0), (20.0, 7.0), (30.0, 9.0)]):
        rows.append(EvalRow("sys", f"mix_{i}", SPEECH, s))
        rows.append(EvalRow("sys", f"mix_{i}", BACKGROUND, b))
    return EvalReport(rows=rows)


class TestEvalReport:
    """Tests for evaluation report aggregation and files."""

    def test_aggregate_is_mean(self):
        agg = {r.target: r for r in _report().aggregate()}
        assert agg[SPEECH].si_sdr_db == pytest.approx(20.0, abs=1e-9)
        assert agg[BACKGROUND].si_sdr_db == pytest.approx(7.0, abs=1e-9)
        assert agg[SPEECH].utterance_id == "ALL"

    def test_summary_layout(self):
        (entry,) = _report().summary_table()
        assert entry["system"] == "sys"
        assert entry["speech_si_sdr_db"] == pytest.approx(20.0)
        assert entry["background_si_sdr_db"] == pytest.approx(7.0)
        assert entry["speech_pesq"] is None

    def test_pesq_column_only_when_scored(self, temp_dir):
        """The PESQ column appears only when a scorer produced values."""
        report = _report()
        path = os.path.join(temp_dir, "r.csv")
        report.save_csv(path)
        with open(path, newline="", encoding="utf-8") as f:
            header = next(csv.reader(f))
        assert "pesq" not in header

        report.rows[0].pesq = 3.1
        report.save_csv(path)
        with open(path, newline="", encoding="utf-8") as f:
            header = next(csv.reader(f))
        assert "pesq" in header

    def test_csv_row_count(self, temp_dir):
        """CSV holds every row plus one aggregate row per target."""
        path = os.path.join(temp_dir, "r.csv")
        _report().save_csv(path)
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 6 + 2

    def test_json_round_trip(self, temp_dir):
        path = os.path.join(temp_dir, "r.json")
        report = _report()
        report.save_json(path)
        loaded = EvalReport.load_json(path)
        assert [r.to_dict() for r in loaded.rows] == [r.to_dict() for r in report.rows]

    def test_json_newer_version(self, temp_dir):
        path = os.path.join(temp_dir, "r.json")
        atomic_write_json(path, {"version": 99, "rows": []})
        with pytest.raises(DataError):
            EvalReport.load_json(path)

    def test_merged_systems(self):
        other = EvalReport(rows=[EvalRow("other", "mix_0", SPEECH, 1.0), EvalRow("other", "mix_0", BACKGROUND, 2.0)])
        merged = _report().merged(other)
        assert merged.systems() == ["sys", "other"]
        assert len(merged.summary_table()) == 2
