"""
Data models, configuration and networks of the voice conversion pipeline.

This package contains the dataclasses used to represent audio signals,
corpus manifests, mixtures, loss records and evaluation reports, the run
configuration tree, and the three torch parameter stores (separator,
bottleneck extractor, voice conversion model with its discriminators).
"""

from models.config import RunConfig
from models.data_models import (
    EvalReport,
    EvalRow,
    LossBreakdown,
    Manifest,
    ManifestRecord,
    MixSpec,
    MixtureRecord,
    TrainingExample,
    Waveform,
)

__all__ = [
    "RunConfig",
    "EvalReport",
    "EvalRow",
    "LossBreakdown",
    "Manifest",
    "ManifestRecord",
    "MixSpec",
    "MixtureRecord",
    "TrainingExample",
    "Waveform",
]
