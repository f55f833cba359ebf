"""
Test cases for the inference pipeline (utils/pipeline.py).

Tests:
- Output length equals input length
- Identity VC stub passes separated speech through
- Background superposition
- Unknown speaker, foreign sample rate and missing VC model
"""

import numpy as np
import pytest

from models.bottleneck import ExtractorHandle
from models.config import RunConfig
from models.conversion import VcModel
from models.data_models import Waveform
from models.separator import Separator, separate_wave
from utils.errors import DataError, UnknownSpeakerError
from utils.pipeline import PipelineModels, convert, convert_parts, fit_length, resynthesize, upper_bound_parts


@pytest.fixture(scope="module")
def models():
    cfg = RunConfig.toy()
    return PipelineModels(
        separator=Separator(cfg.separator, cfg.audio.frame),
        extractor=ExtractorHandle.seeded_default(cfg.bottleneck, cfg.audio),
        vc=VcModel(cfg.vc, cfg.bottleneck.feature_dim, ["spk_high", "spk_low"]),
    ).eval()


@pytest.fixture
def mix(rng):
    return Waveform(0.3 * rng.standard_normal(5000))


class TestConvert:
    """Tests for end-to-end conversion."""

    @pytest.mark.parametrize("keep", [True, False])
    def test_length_preserved(self, models, mix, keep):
        out = convert(mix, "spk_low", keep, models)
        assert len(out) == len(mix)
        assert np.all(np.isfinite(out.samples))

    @pytest.mark.parametrize("n", [256, 999, 3217, 8000])
    def test_length_over_input_lengths(self, models, rng, n):
        mix = Waveform(0.3 * rng.standard_normal(n))
        for keep in (True, False):
            assert len(convert(mix, "spk_high", keep, models)) == n

    def test_identity_stub_without_background(self, models, mix):
        """No background + identity stub gives the separated speech."""
        out = convert(mix, "spk_low", False, models, vc_stub="identity")
        speech, _ = separate_wave(mix, models.separator)
        assert np.allclose(out.samples, speech.samples)

    def test_background_added(self, models, mix):
        parts = convert_parts(mix, "spk_high", models, keep_background=True)
        assert np.allclose(parts.output.samples, parts.converted.samples + parts.background.samples)

    def test_identity_masks_and_stub(self, models, mix):
        """Identity masks and identity VC: speech + background is twice the mixture."""
        parts = convert_parts(mix, "spk_high", models, keep_background=True, vc_stub="identity",
                              force_identity_masks=True)
        assert np.max(np.abs(parts.output.samples - 2 * mix.samples)) < 1e-4

    def test_unknown_speaker(self, models, mix):
        with pytest.raises(UnknownSpeakerError):
            convert(mix, "nobody", True, models)

    def test_foreign_rate(self, models):
        with pytest.raises(DataError, match="Hz"):
            convert(Waveform(np.zeros(4000), 8000), "spk_low", True, models)

    def test_unknown_stub(self, models, mix):
        with pytest.raises(ValueError):
            convert(mix, "spk_low", True, models, vc_stub="copy")

    def test_missing_vc_model(self, models, mix):
        no_vc = PipelineModels(separator=models.separator, extractor=models.extractor)
        with pytest.raises(ValueError, match="stub"):
            convert(mix, "spk_low", True, no_vc)
        assert len(convert(mix, "any", True, no_vc, vc_stub="identity")) == len(mix)


class TestUpperBound:
    """Tests for converting the clean source and adding the original background."""

    def test_parts(self, models, rng):
        speech = Waveform(0.3 * rng.standard_normal(3000))
        background = Waveform(0.1 * rng.standard_normal(3000))
        parts = upper_bound_parts(speech, background, "spk_low", models)
        assert parts.speech is speech and parts.background is background
        assert len(parts.converted) == len(parts.output) == 3000
        assert np.allclose(parts.mix.samples, speech.samples + background.samples)
        assert np.allclose(parts.output.samples, parts.converted.samples + background.samples)
        assert np.allclose(parts.converted.samples, resynthesize(speech, "spk_low", models, 3000).samples)

    def test_length_mismatch(self, models):
        with pytest.raises(DataError, match="samples"):
            upper_bound_parts(Waveform(np.ones(3000)), Waveform(np.ones(2000)), "spk_low", models)

    def test_unknown_speaker(self, models, rng):
        w = Waveform(rng.standard_normal(3000))
        with pytest.raises(UnknownSpeakerError):
            upper_bound_parts(w, w, "nobody", models)


class TestFitLength:
    def test_trim(self):
        assert list(fit_length(np.arange(5.0), 3)) == [0.0, 1.0, 2.0]

    def test_pad(self):
        assert list(fit_length(np.ones(2), 4)) == [1.0, 1.0, 0.0, 0.0]
