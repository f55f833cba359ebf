"""
Test cases for the dual-mask separator (models/separator.py).

Tests:
- Mask shapes and the magnitude bound
- Identity masks reproduce the mixture
- Frame-parameter and bin-count mismatches
- Seeded construction is reproducible
- Gradients reach every parameter; silence in, silence out
- Complex layers match complex arithmetic
"""

import numpy as np
import pytest
import torch

from models.config import FrameParams, SeparatorConfig
from models.params import param_hash
from models.data_models import Waveform
from models.separator import (
    ComplexConv2d,
    ComplexLinear,
    Separator,
    bound_mask,
    separate_spec,
    separate_wave,
)
from utils.dsp import stft

TOY_FRAME = FrameParams(fft_size=256, hop=64)


@pytest.fixture(scope="module")
def separator():
    return Separator(SeparatorConfig(), TOY_FRAME).eval()


class TestBoundMask:
    """Tests for mask saturation."""

    def test_magnitude_bounded(self):
        re = torch.randn(50) * 100
        im = torch.randn(50) * 100
        assert float(bound_mask(re, im, 1.0).abs().max()) <= 1.0 + 1e-6

    def test_phase_kept(self):
        re, im = torch.tensor([3.0, -1.0]), torch.tensor([4.0, 2.0])
        mask = bound_mask(re, im, 2.0)
        assert torch.allclose(torch.angle(mask), torch.atan2(im, re), atol=1e-5)


class TestSeparator:
    """Tests for the separator network."""

    def test_mask_shapes(self, separator):
        bins = torch.randn(2, 30, TOY_FRAME.n_bins, dtype=torch.complex64)
        with torch.no_grad():
            m_s, m_b = separator(bins)
        assert m_s.shape == bins.shape
        assert m_b.shape == bins.shape
        assert m_s.is_complex()

    def test_unbatched_input(self, separator):
        bins = torch.randn(17, TOY_FRAME.n_bins, dtype=torch.complex64)
        with torch.no_grad():
            m_s, _ = separator(bins)
        assert m_s.shape == bins.shape

    def test_masks_within_bound(self, separator):
        bins = 10 * torch.randn(1, 20, TOY_FRAME.n_bins, dtype=torch.complex64)
        with torch.no_grad():
            m_s, m_b = separator(bins)
        bound = separator.cfg.mask_bound
        assert float(m_s.abs().max()) <= bound + 1e-5
        assert float(m_b.abs().max()) <= bound + 1e-5

    def test_wrong_bin_count(self, separator):
        with pytest.raises(ValueError, match="bins"):
            separator(torch.randn(1, 10, 100, dtype=torch.complex64))

    def test_seeded_construction(self):
        """Same config gives identical parameters."""
        a = Separator(SeparatorConfig(), TOY_FRAME)
        b = Separator(SeparatorConfig(), TOY_FRAME)
        assert param_hash(a) == param_hash(b)


class TestSeparate:
    """Tests for separate_spec / separate_wave."""

    def test_identity_masks_return_mixture(self, separator, sine):
        spec = stft(sine, TOY_FRAME)
        out = separate_spec(spec, separator, force_identity_masks=True)
        assert torch.max(torch.abs(out.est_speech.bins - spec.bins)) <= 1e-12
        assert torch.max(torch.abs(out.est_background.bins - spec.bins)) <= 1e-12

    def test_frame_params_mismatch(self, separator, sine):
        spec = stft(sine, FrameParams(fft_size=512, hop=128))
        with pytest.raises(ValueError, match="frame params"):
            separate_spec(spec, separator)

    def test_wave_lengths(self, separator, sine):
        speech, background = separate_wave(sine, separator)
        assert len(speech) == len(sine)
        assert len(background) == len(sine)
        assert np.all(np.isfinite(speech.samples))

    def test_identity_wave_reconstructs(self, separator, sine):
        speech, _ = separate_wave(sine, separator, force_identity_masks=True)
        assert np.max(np.abs(speech.samples - sine.samples)) < 1e-4

    def test_zero_mixture(self, separator):
        """A silent mixture separates into two silent sources."""
        speech, background = separate_wave(Waveform(np.zeros(3000)), separator)
        assert np.all(speech.samples == 0.0)
        assert np.all(background.samples == 0.0)

    def test_random_lengths(self, separator, rng):
        for n in [256, 257, 1000] + [int(v) for v in rng.integers(256, 6000, size=5)]:
            mix = Waveform(0.1 * rng.standard_normal(n))
            speech, background = separate_wave(mix, separator)
            assert len(speech) == len(background) == n


class TestGradients:
    """Tests for gradient flow through the separator."""

    def test_every_parameter_receives_gradient(self):
        separator = Separator(SeparatorConfig(), TOY_FRAME)
        torch.manual_seed(0)
        bins = torch.randn(2, 12, TOY_FRAME.n_bins, dtype=torch.complex64)
        m_s, m_b = separator(bins)
        loss = (bins * m_s).abs().pow(2).sum() + (bins * m_b).real.sum()
        loss.backward()
        for name, param in separator.named_parameters():
            assert param.grad is not None, name
            assert float(param.grad.abs().sum()) > 0, name


class TestComplexLayers:
    """The paired real layers implement complex multiplication."""

    def test_conv_matches_complex_product(self):
        torch.manual_seed(0)
        conv = ComplexConv2d(3, 2, kernel_size=1, bias=False)
        re, im = torch.randn(1, 3, 5, 4), torch.randn(1, 3, 5, 4)
        out_re, out_im = conv((re, im))

        weight = torch.complex(conv.conv_re.weight[:, :, 0, 0], conv.conv_im.weight[:, :, 0, 0])
        expected = torch.einsum("oi,bift->boft", weight, torch.complex(re, im))
        assert torch.allclose(out_re, expected.real, atol=1e-5)
        assert torch.allclose(out_im, expected.imag, atol=1e-5)

    def test_linear_matches_complex_product(self):
        torch.manual_seed(1)
        fc = ComplexLinear(6, 4)
        re, im = torch.randn(3, 6), torch.randn(3, 6)
        out_re, out_im = fc((re, im))

        weight = torch.complex(fc.fc_re.weight, fc.fc_im.weight)
        bias = torch.complex(fc.fc_re.bias - fc.fc_im.bias, fc.fc_re.bias + fc.fc_im.bias)
        expected = torch.complex(re, im) @ weight.T + bias
        assert torch.allclose(out_re, expected.real, atol=1e-5)
        assert torch.allclose(out_im, expected.imag, atol=1e-5)
