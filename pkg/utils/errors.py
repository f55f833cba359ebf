"""
Exception types shared across the pipeline.

The command line maps each family to a stable exit code:
ConfigError -> 1, DataError / CheckpointError -> 2, NumericAbort -> 3,
FrozenStoreError -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration value, unknown config key or bad CLI usage."""


class DataError(ValueError):
    """Bad input data: wrong sample rate, silent audio, missing files, ..."""


class UnknownSpeakerError(DataError, KeyError):
    """A speaker id that is not in the speaker registry."""

    def __str__(self) -> str:
        # KeyError quotes its message; keep the plain ValueError form
        return ValueError.__str__(self)


class CheckpointError(ValueError):
    """Checkpoint or container file is corrupt, too new, or mismatched."""


class NonSmoothPointError(ValueError):
    """A gradient check was requested at a point where the loss has a kink."""


class NumericAbort(RuntimeError):
    """
    Raised when a loss term becomes NaN or Inf during training.

    Attributes:
        term: Name of the offending loss term.
        step: Training step at which it happened (or -1 if unknown).
    """

    def __init__(self, term: str, step: int = -1, value: float = float("nan")):
        self.term = term
        self.step = step
        self.value = value
        super().__init__(
            f"Non-finite loss term '{term}' (value {value}) at step {step}; aborting."
        )


class FrozenStoreError(RuntimeError):
    """A parameter store that a stage keeps frozen changed during that stage."""

    def __init__(self, store: str, stage: str):
        self.store = store
        self.stage = stage
        super().__init__(f"frozen store '{store}' changed during stage '{stage}'")
