"""
Pytest configuration and shared fixtures for the voice conversion tests.
"""

import sys
import os
import tempfile
import pytest

# Add project root to path
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if project_root not in sys.path:
    sys.path.insert(0, project_root)


@pytest.fixture
def temp_dir():
    """Provide a temporary directory that is cleaned up after the test."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield tmpdir


@pytest.fixture
def rng():
    """A fixed-seed numpy generator."""
    import numpy as np
    return np.random.default_rng(1234)


@pytest.fixture
def toy_config():
    """Desk-scale config with short crops and tiny stage budgets for fast tests."""
    from models.config import RunConfig

    cfg = RunConfig.toy()
    cfg.data.crop_seconds = 0.25
    cfg.training.vc_steps = 2
    cfg.training.ss_steps = 2
    cfg.training.joint_steps = 2
    cfg.training.log_every = 1
    cfg.training.freeze_check_every = 1
    return cfg.validate()


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """
    The bundled toy corpus plus an 8-mixture set built from it.

    Returns a dict with the speech / background manifest paths and the
    mixture manifest path.
    """
    from models.config import DataConfig
    from models.data_models import Manifest
    from utils.mixing import build_mixture_set, build_toy_corpus

    root = str(tmp_path_factory.mktemp("toy"))
    speech, background = build_toy_corpus(os.path.join(root, "corpus"), seed=0)
    mixtures = build_mixture_set(
        Manifest.load_jsonl(speech), Manifest.load_jsonl(background), 8,
        os.path.join(root, "mix"), DataConfig(), seed=0,
    )
    return {"root": root, "speech": speech, "background": background, "mixtures": mixtures}


@pytest.fixture
def sine():
    """One second of a 440 Hz tone at 16 kHz."""
    import numpy as np
    from models.data_models import Waveform

    t = np.arange(16000) / 16000.0
    return Waveform(0.5 * np.sin(2 * np.pi * 440.0 * t))
