"""
Test cases for the command-line interface (cli/commands.py).

Tests:
- Exit codes for usage, data and checkpoint errors
- mix: n = 0, byte-identical output for the same seed
- train: run directory layout, frozen stores, ablation logs
- convert / eval / inspect on small checkpoints
"""

import json
import os

import numpy as np
import pytest
import soundfile as sf
import yaml

import cli.commands
from cli.commands import EXIT_CONFIG, EXIT_DATA, EXIT_FREEZE, EXIT_OK, run
from models.config import RunConfig
from models.data_models import Waveform, read_loss_log
from utils.dsp import write_wav
from utils.errors import FrozenStoreError
from utils.training import TrainState, checkpoint_info, save_checkpoint

SPEAKERS = ["spk_high", "spk_low"]


@pytest.fixture
def toy_yaml(temp_dir):
    """A toy-preset config file with tiny crops."""
    path = os.path.join(temp_dir, "toy.yaml")
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump({"preset": "toy", "data": {"crop_seconds": 0.25}}, f)
    return path


@pytest.fixture
def checkpoint(temp_dir):
    path = os.path.join(temp_dir, "untrained.pt")
    save_checkpoint(TrainState(RunConfig.toy(), SPEAKERS), path)
    return path


@pytest.fixture
def input_wav(temp_dir, rng):
    path = os.path.join(temp_dir, "in.wav")
    write_wav(Waveform(0.2 * rng.standard_normal(4000)), path)
    return path


def _mix_args(toy_corpus, out, n, seed=1):
    return ["mix", "--speech-manifest", toy_corpus["speech"], "--background-manifest", toy_corpus["background"],
            "--out", out, "--n", str(n), "--seed", str(seed)]


class TestUsage:
    """Tests for argument errors."""

    def test_no_command(self):
        assert run([]) == EXIT_CONFIG

    def test_unknown_option(self):
        assert run(["mix", "--bogus"]) == EXIT_CONFIG

    def test_bad_ablation(self, temp_dir):
        assert run(["train", "--data", "x", "--run-dir", temp_dir, "--ablate", "no-ss"]) == EXIT_CONFIG

    def test_bad_config_file(self, temp_dir):
        path = os.path.join(temp_dir, "bad.yaml")
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump({"training": {"lambda": 1}}, f)
        assert run(["--config", path, "mix", "--speech-manifest", "a", "--background-manifest", "b",
                    "--out", temp_dir]) == EXIT_CONFIG


class TestMix:
    """Tests for the mix command."""

    def test_zero(self, toy_corpus, temp_dir):
        out = os.path.join(temp_dir, "mix")
        assert run(_mix_args(toy_corpus, out, 0)) == EXIT_OK
        with open(os.path.join(out, "mixtures.jsonl"), "r", encoding="utf-8") as f:
            assert f.read() == ""

    def test_same_seed_identical(self, toy_corpus, temp_dir):
        outs = [os.path.join(temp_dir, name) for name in ("a", "b")]
        for out in outs:
            assert run(_mix_args(toy_corpus, out, 4, seed=7)) == EXIT_OK
        for rel in ("mixtures.jsonl", os.path.join("mix", "mix_00003.wav"),
                    os.path.join("background", "mix_00003.wav")):
            with open(os.path.join(outs[0], rel), "rb") as fa, open(os.path.join(outs[1], rel), "rb") as fb:
                assert fa.read() == fb.read()

    def test_missing_manifest(self, temp_dir):
        assert run(["mix", "--speech-manifest", os.path.join(temp_dir, "none.jsonl"),
                    "--background-manifest", os.path.join(temp_dir, "none.jsonl"),
                    "--out", temp_dir, "--n", "2"]) == EXIT_DATA

    def test_snr_range_inverted(self, toy_corpus, temp_dir):
        args = _mix_args(toy_corpus, temp_dir, 2) + ["--snr-min", "8", "--snr-max", "2"]
        assert run(args) == EXIT_CONFIG


class TestTrain:
    """Tests for the train command."""

    def test_ss_stage(self, toy_corpus, toy_yaml, temp_dir):
        """The ss stage leaves the VC store untouched."""
        run_dir = os.path.join(temp_dir, "run")
        code = run(["--config", toy_yaml, "train", "--data", toy_corpus["mixtures"], "--run-dir", run_dir,
                    "--stage", "ss", "--steps", "2"])
        assert code == EXIT_OK
        for name in ("config.yaml", "run.log", "run_manifest.json", "train_log.jsonl"):
            assert os.path.exists(os.path.join(run_dir, name))
        assert os.path.exists(os.path.join(run_dir, "checkpoints", "ss.pt"))
        assert os.path.exists(os.path.join(run_dir, "figures", "figures.json"))

        cfg = RunConfig.from_yaml(os.path.join(run_dir, "config.yaml"))
        fresh = TrainState(cfg, SPEAKERS).hashes()
        trained = checkpoint_info(os.path.join(run_dir, "checkpoints", "latest.pt"))["hashes"]
        assert trained["vc"] == fresh["vc"]
        assert trained["discriminator"] == fresh["discriminator"]
        assert trained["separator"] != fresh["separator"]

    def test_ablate_ss_loss(self, toy_corpus, toy_yaml, temp_dir):
        """--ablate ss-loss skips the ss stage and never logs ss terms."""
        run_dir = os.path.join(temp_dir, "run")
        code = run(["--config", toy_yaml, "train", "--data", toy_corpus["mixtures"], "--run-dir", run_dir,
                    "--ablate", "ss-loss", "--steps", "1"])
        assert code == EXIT_OK
        log = read_loss_log(os.path.join(run_dir, "train_log.jsonl"))
        assert [b.stage for b in log] == ["vc", "joint"]
        assert all("ss_s" not in b and "ss_b" not in b for b in log)
        assert not os.path.exists(os.path.join(run_dir, "checkpoints", "ss.pt"))
        with open(os.path.join(run_dir, "run_manifest.json"), "r", encoding="utf-8") as f:
            assert json.load(f)["ablate"] == "ss-loss"

    def test_missing_data(self, toy_yaml, temp_dir):
        assert run(["--config", toy_yaml, "train", "--data", os.path.join(temp_dir, "none.jsonl"),
                    "--run-dir", os.path.join(temp_dir, "run")]) == EXIT_DATA

    def test_frozen_store_changed(self, toy_corpus, toy_yaml, temp_dir, monkeypatch):
        """A freeze violation ends the run with its own exit code."""
        def violate(*args, **kwargs):
            raise FrozenStoreError("vc", "ss")

        monkeypatch.setattr(cli.commands, "run_schedule", violate)
        code = run(["--config", toy_yaml, "train", "--data", toy_corpus["mixtures"],
                    "--run-dir", os.path.join(temp_dir, "run"), "--stage", "ss", "--steps", "1"])
        assert code == EXIT_FREEZE


class TestConvert:
    """Tests for the convert command."""

    def test_unknown_speaker(self, checkpoint, input_wav, temp_dir):
        assert run(["convert", "--checkpoint", checkpoint, "--input", input_wav,
                    "--out-dir", temp_dir, "--target-speaker", "nobody"]) == EXIT_DATA

    def test_convert(self, checkpoint, input_wav, temp_dir):
        out_dir = os.path.join(temp_dir, "out")
        code = run(["convert", "--checkpoint", checkpoint, "--input", input_wav, "--out-dir", out_dir,
                    "--target-speaker", "spk_low", "--no-background"])
        assert code == EXIT_OK
        assert os.path.exists(os.path.join(out_dir, "in_spk_low.wav"))

    def test_output_duration(self, checkpoint, input_wav, temp_dir):
        """The converted file is as long as the input, within one hop."""
        out_dir = os.path.join(temp_dir, "out")
        assert run(["convert", "--checkpoint", checkpoint, "--input", input_wav, "--out-dir", out_dir,
                    "--target-speaker", "spk_high"]) == EXIT_OK
        hop = RunConfig.toy().audio.frame.hop
        info = sf.info(os.path.join(out_dir, "in_spk_high.wav"))
        assert info.samplerate == 16000
        assert abs(info.frames - 4000) <= hop

    @pytest.mark.parametrize("n_samples", [100, 255])
    def test_short_input(self, checkpoint, temp_dir, n_samples):
        """Input shorter than one analysis frame is a data error."""
        path = os.path.join(temp_dir, "short.wav")
        sf.write(path, np.zeros(n_samples), 16000, subtype="PCM_16")
        assert run(["convert", "--checkpoint", checkpoint, "--input", path, "--out-dir", temp_dir,
                    "--target-speaker", "spk_low"]) == EXIT_DATA

    def test_needs_speaker_or_stub(self, checkpoint, input_wav, temp_dir):
        assert run(["convert", "--checkpoint", checkpoint, "--input", input_wav,
                    "--out-dir", temp_dir]) == EXIT_CONFIG

    def test_corrupt_checkpoint(self, input_wav, temp_dir):
        path = os.path.join(temp_dir, "bad.pt")
        with open(path, "wb") as f:
            f.write(b"\x00" * 16)
        assert run(["convert", "--checkpoint", path, "--input", input_wav, "--out-dir", temp_dir,
                    "--vc-stub", "identity"]) == EXIT_DATA

    def test_foreign_rate(self, checkpoint, temp_dir):
        path = os.path.join(temp_dir, "8k.wav")
        sf.write(path, np.zeros(8000), 8000, subtype="PCM_16")
        assert run(["convert", "--checkpoint", checkpoint, "--input", path, "--out-dir", temp_dir,
                    "--vc-stub", "identity"]) == EXIT_DATA


class TestEvalAndInspect:
    """Tests for eval and inspect."""

    def test_eval_oracle_and_checkpoint(self, toy_corpus, checkpoint, temp_dir):
        out_dir = os.path.join(temp_dir, "eval")
        code = run(["eval", "--data", toy_corpus["mixtures"], "--out-dir", out_dir, "--oracle", "--baseline",
                    "--checkpoint", f"untrained={checkpoint}"])
        assert code == EXIT_OK
        with open(os.path.join(out_dir, "report.json"), "r", encoding="utf-8") as f:
            systems = {row["system"] for row in json.load(f)["rows"]}
        assert systems == {"mixture", "oracle", "untrained"}
        assert os.path.exists(os.path.join(out_dir, "untrained", "report.csv"))
        assert os.path.exists(os.path.join(out_dir, "report.xlsx"))

    def test_eval_upper_bound(self, toy_corpus, checkpoint, temp_dir):
        out_dir = os.path.join(temp_dir, "eval")
        code = run(["eval", "--data", toy_corpus["mixtures"], "--out-dir", out_dir, "--upper-bound", checkpoint])
        assert code == EXIT_OK
        with open(os.path.join(out_dir, "report.json"), "r", encoding="utf-8") as f:
            rows = json.load(f)["rows"]
        assert {row["system"] for row in rows} == {"upper_bound"}
        assert all(row["mel_l1"] is not None for row in rows if row["target"] == "speech")

    def test_eval_needs_system(self, toy_corpus, temp_dir):
        assert run(["eval", "--data", toy_corpus["mixtures"], "--out-dir", temp_dir]) == EXIT_CONFIG

    def test_inspect(self, checkpoint, capsys):
        assert run(["inspect", "--checkpoint", checkpoint]) == EXIT_OK
        info = json.loads(capsys.readouterr().out)
        assert info["step"] == 0
        assert set(info["hashes"]) == {"separator", "vc", "discriminator", "extractor"}

    def test_inspect_missing(self, temp_dir):
        assert run(["inspect", "--checkpoint", os.path.join(temp_dir, "none.pt")]) == EXIT_DATA
