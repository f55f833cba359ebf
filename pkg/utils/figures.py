"""
Figure emission: one loss curve per logged term and mel-spectrogram panels
of one evaluated example.

Filenames depend only on the term and panel names, so reruns overwrite the
same files. ``figures.json`` lists what was emitted and what was omitted.
"""

import logging
import os
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from models.config import EvaluationConfig  # noqa: E402
from models.data_models import _SCHEMA_VERSION, EvalReport, LossBreakdown, atomic_write_json, read_loss_log  # noqa: E402

logger = logging.getLogger(__name__)

MEL_PANELS = ("mix", "separated_speech", "separated_background", "converted", "recomposed")
MANIFEST_NAME = "figures.json"

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
}


def loss_curve_name(term: str) -> str:
    return f"loss_{term}.png"


def mel_panel_name(panel: str) -> str:
    return f"mel_{panel}.png"


def _new_figure(cfg: EvaluationConfig):
    fig, ax = plt.subplots(figsize=(cfg.figure_width, cfg.figure_height), dpi=cfg.figure_dpi)
    return fig, ax


def _save(fig, path: str, cfg: EvaluationConfig) -> None:
    # no tight bbox: pixel size must stay width*dpi x height*dpi
    fig.savefig(path, dpi=cfg.figure_dpi, format="png")
    plt.close(fig)


def plot_loss_curve(log: Sequence[LossBreakdown], term: str, path: str, cfg: EvaluationConfig) -> None:
    steps = [b.step for b in log if term in b]
    values = [b[term] for b in log if term in b]
    with plt.rc_context(STYLE):
        fig, ax = _new_figure(cfg)
        ax.plot(steps, values, linewidth=1.0)
        previous = None
        for b in log:
            if term in b and previous is not None and b.stage != previous:
                ax.axvline(b.step, color="0.6", linestyle="--", linewidth=0.8)
            if term in b:
                previous = b.stage
        ax.set_xlabel("step")
        ax.set_ylabel(term)
        ax.set_title(f"{term} ({', '.join(dict.fromkeys(b.stage for b in log if term in b))})")
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        _save(fig, path, cfg)


def plot_mel_panel(frames: np.ndarray, title: str, path: str, cfg: EvaluationConfig) -> None:
    """``frames`` is (T, n_mels); drawn with time on x and mel bin on y."""
    with plt.rc_context(STYLE):
        fig, ax = _new_figure(cfg)
        image = ax.imshow(np.asarray(frames).T, origin="lower", aspect="auto", interpolation="nearest",
                          cmap="magma")
        fig.colorbar(image, ax=ax, label="log mel")
        ax.set_xlabel("frame")
        ax.set_ylabel("mel bin")
        ax.set_title(title)
        fig.tight_layout()
        _save(fig, path, cfg)


def emit_figures(training_log: Union[str, Sequence[LossBreakdown]], report: Optional[EvalReport],
                 out_dir: str, cfg: Optional[EvaluationConfig] = None) -> Dict[str, List]:
    """
    Write loss curves and mel panels into ``out_dir``.

    Args:
        training_log: LossBreakdown records, or the path of a JSON-lines log.
        report: Evaluation report whose ``panels`` hold the mel arrays;
            missing panels are omitted and noted in the manifest.
        out_dir: Output directory.
        cfg: Figure size and dpi.

    Returns:
        The manifest written to ``figures.json``:
        ``{"version", "emitted": [names], "omitted": [{"name", "reason"}]}``.

    Raises:
        ValueError: If the training log is empty.
    """
    cfg = cfg or EvaluationConfig()
    log = read_loss_log(training_log) if isinstance(training_log, str) else list(training_log)
    if not log:
        raise ValueError("training log is empty; nothing to plot")
    os.makedirs(out_dir, exist_ok=True)

    emitted, omitted = [], []
    terms = sorted({t for b in log for t in b.keys()})
    for term in terms:
        name = loss_curve_name(term)
        plot_loss_curve(log, term, os.path.join(out_dir, name), cfg)
        emitted.append(name)

    panels = report.panels if report is not None else {}
    for panel in MEL_PANELS:
        name = mel_panel_name(panel)
        frames = panels.get(panel)
        if frames is None or np.asarray(frames).size == 0:
            reason = "no evaluation report" if report is None else "panel not in report"
            omitted.append({"name": name, "reason": reason})
            continue
        plot_mel_panel(frames, panel.replace("_", " "), os.path.join(out_dir, name), cfg)
        emitted.append(name)

    manifest = {"version": _SCHEMA_VERSION, "emitted": emitted, "omitted": omitted}
    atomic_write_json(os.path.join(out_dir, MANIFEST_NAME), manifest)
    logger.info("[Figures] %d emitted, %d omitted in %s", len(emitted), len(omitted), out_dir)
    return manifest
