"""
Training objectives: phase-aware separation losses, mel reconstruction
losses, least-squares GAN losses, feature matching, the weighted multi-task
total, and a finite-difference gradient checker.

Every loss accepts either the domain containers (ComplexSpectrogram,
MelSpectrogram) or raw tensors, and returns a scalar tensor.
"""

from typing import Callable, Dict, List, Mapping, Optional, Sequence, Union

import torch
import torch.nn.functional as F

from models.config import MtlWeights, PlcpaConfig
from models.data_models import ComplexSpectrogram, LossBreakdown, MelSpectrogram
from utils.dsp import compress_bins, compressed_magnitude
from utils.errors import NonSmoothPointError

TensorLike = Union[torch.Tensor, ComplexSpectrogram, MelSpectrogram]

# Term groups of the multi-task total, keyed by the weight that scales them
TERM_GROUPS = {
    "lambda_uni": ("rec_uni",),
    "lambda_ss": ("ss_s", "ss_b"),
    "lambda_vc": ("rec_vc", "adv_gen", "fm"),
}
TERM_NAMES = ("rec_uni", "ss_s", "ss_b", "rec_vc", "adv_gen", "adv_dis", "fm", "total")

# Complex points closer than this to the origin are non-smooth for |s|^p
SMOOTH_EPS = 1e-8


def _tensor(x: TensorLike) -> torch.Tensor:
    if isinstance(x, ComplexSpectrogram):
        return x.bins
    if isinstance(x, MelSpectrogram):
        return x.frames
    return x


def _check_shapes(est: torch.Tensor, ref: torch.Tensor, what: str) -> None:
    if est.shape != ref.shape:
        raise ValueError(f"{what}: estimate shape {tuple(est.shape)} != reference shape {tuple(ref.shape)}")


# ---------------------------------------------------------------------------
# Separation losses
# ---------------------------------------------------------------------------

def plcpa(est: TensorLike, ref: TensorLike, cfg: PlcpaConfig) -> torch.Tensor:
    """
    Power-law compressed phase-aware loss.

    Mean over bins of ``alpha * L_a + (1 - alpha) * L_p`` where L_a is the
    squared compressed-magnitude error and L_p the squared error of the
    compressed complex values.

    Raises:
        ValueError: On shape mismatch or an invalid config.
    """
    cfg.validate()
    est, ref = _tensor(est), _tensor(ref)
    _check_shapes(est, ref, "plcpa")
    amp = (compressed_magnitude(ref, cfg.p) - compressed_magnitude(est, cfg.p)) ** 2
    diff = compress_bins(ref, cfg.p) - compress_bins(est, cfg.p)
    phase = diff.real ** 2 + diff.imag ** 2
    return torch.mean(cfg.alpha * amp + (1.0 - cfg.alpha) * phase)


def asym_os(est: TensorLike, ref: TensorLike, p: float) -> torch.Tensor:
    """
    Over-suppression penalty: mean of relu(|ref|^p - |est|^p)^2.

    Over-estimation (|est| >= |ref|) is not penalized.
    """
    est, ref = _tensor(est), _tensor(ref)
    _check_shapes(est, ref, "asym_os")
    gap = compressed_magnitude(ref, p) - compressed_magnitude(est, p)
    return torch.mean(F.relu(gap) ** 2)


def plcpa_asym(est: TensorLike, ref: TensorLike, cfg: PlcpaConfig) -> torch.Tensor:
    """plcpa plus ``beta`` times the over-suppression penalty."""
    loss = plcpa(est, ref, cfg)
    if cfg.beta == 0:
        return loss
    return loss + cfg.beta * asym_os(est, ref, cfg.p)


# ---------------------------------------------------------------------------
# Reconstruction losses
# ---------------------------------------------------------------------------

def _mel_l1(mel_hat: TensorLike, mel_ref: TensorLike, what: str) -> torch.Tensor:
    mel_hat, mel_ref = _tensor(mel_hat), _tensor(mel_ref)
    _check_shapes(mel_hat, mel_ref, what)
    return torch.mean(torch.abs(mel_ref - mel_hat))


def rec_uni(mel_hat: TensorLike, mel_ref: TensorLike) -> torch.Tensor:
    """Mean L1 between the recomposed mixture's mel and the input mixture's mel."""
    return _mel_l1(mel_hat, mel_ref, "rec_uni")


def rec_vc(mel_hat_s: TensorLike, mel_ref_s: TensorLike) -> torch.Tensor:
    """Mean L1 between converted-speech mel and speech mel."""
    return _mel_l1(mel_hat_s, mel_ref_s, "rec_vc")


# ---------------------------------------------------------------------------
# Adversarial losses
# ---------------------------------------------------------------------------

def _as_list(scores) -> List[torch.Tensor]:
    if isinstance(scores, torch.Tensor):
        return [scores]
    return list(scores)


def adv_gen(disc_scores_fake: Sequence[torch.Tensor]) -> torch.Tensor:
    """
    Least-squares generator loss averaged over discriminators.

    Raises:
        ValueError: If no discriminator output is given.
    """
    scores = _as_list(disc_scores_fake)
    if not scores:
        raise ValueError("adv_gen needs at least one discriminator output")
    loss = 0.0
    for score in scores:
        loss = loss + torch.mean((score - 1.0) ** 2)
    return loss / len(scores)


def adv_dis(scores_real: Sequence[torch.Tensor], scores_fake: Sequence[torch.Tensor]) -> torch.Tensor:
    """
    Least-squares discriminator loss averaged over discriminators.

    Raises:
        ValueError: If the lists are empty or differ in length.
    """
    real, fake = _as_list(scores_real), _as_list(scores_fake)
    if len(real) != len(fake):
        raise ValueError(f"adv_dis: {len(real)} real outputs vs {len(fake)} fake outputs")
    if not real:
        raise ValueError("adv_dis needs at least one discriminator output")
    loss = 0.0
    for r, f in zip(real, fake):
        loss = loss + torch.mean((r - 1.0) ** 2) + torch.mean(f ** 2)
    return loss / len(real)


def _nested(feats) -> List[List[torch.Tensor]]:
    feats = list(feats)
    if feats and isinstance(feats[0], torch.Tensor):
        return [feats]
    return [list(layers) for layers in feats]


def feat_match(feats_real, feats_fake) -> torch.Tensor:
    """
    Feature matching loss.

    For each discriminator, the sum over layers of the mean absolute
    difference between real and generated features; averaged over
    discriminators. Real features are treated as constants. A flat list of
    tensors is one discriminator.

    Raises:
        ValueError: On empty input or mismatched nesting or shapes.
    """
    real, fake = _nested(feats_real), _nested(feats_fake)
    if not real:
        raise ValueError("feat_match needs at least one discriminator's features")
    if len(real) != len(fake):
        raise ValueError(f"feat_match: {len(real)} real discriminators vs {len(fake)} fake")
    loss = 0.0
    for d, (layers_r, layers_f) in enumerate(zip(real, fake)):
        if len(layers_r) != len(layers_f):
            raise ValueError(f"feat_match: discriminator {d} has {len(layers_r)} vs {len(layers_f)} layers")
        for i, (r, f) in enumerate(zip(layers_r, layers_f)):
            if r.shape != f.shape:
                raise ValueError(
                    f"feat_match: discriminator {d} layer {i} shape {tuple(r.shape)} != {tuple(f.shape)}"
                )
            loss = loss + torch.mean(torch.abs(r.detach() - f))
    return loss / len(real)


# ---------------------------------------------------------------------------
# Multi-task total
# ---------------------------------------------------------------------------

def mtl_total(parts: Union[LossBreakdown, Mapping[str, object]], w: MtlWeights):
    """
    Weighted multi-task total.

    ``lambda_uni * rec_uni + lambda_ss * (ss_s + ss_b)
    + lambda_vc * (rec_vc + adv_gen + fm)``. A group whose weight is zero is
    skipped and its terms may be absent.

    Args:
        parts: Term values (floats or scalar tensors).
        w: Multi-task weights.

    Raises:
        ValueError: If a term of a non-zero-weighted group is missing.
    """
    terms = parts.terms if isinstance(parts, LossBreakdown) else parts
    total = 0.0
    for weight_name, names in TERM_GROUPS.items():
        weight = getattr(w, weight_name)
        if weight == 0:
            continue
        missing = [n for n in names if n not in terms]
        if missing:
            raise ValueError(f"mtl_total: missing loss term(s) {missing} (weight {weight_name}={weight})")
        group = 0.0
        for name in names:
            group = group + terms[name]
        total = total + weight * group
    return total


def make_breakdown(terms: Mapping[str, object], w: MtlWeights, step: int = 0,
                   stage: str = "") -> LossBreakdown:
    """
    Convert computed terms to floats and attach the multi-task total.

    The total is recomputed from the float parts, so it matches
    ``mtl_total(breakdown, w)`` exactly.
    """
    values: Dict[str, float] = {
        name: float(value.detach().item() if isinstance(value, torch.Tensor) else value)
        for name, value in terms.items()
        if name != "total"
    }
    values["total"] = float(mtl_total(values, w))
    return LossBreakdown(terms=values, step=step, stage=stage)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def l1_kink(ref: torch.Tensor) -> Callable[[torch.Tensor], float]:
    """Distance of a point from the kinks of ``|est - ref|``."""
    ref = ref.detach().to(torch.float64)
    return lambda est: float(torch.min(torch.abs(est.detach() - ref)))


def asym_os_kink(ref: TensorLike, p: float) -> Callable[[torch.Tensor], float]:
    """Distance (in compressed magnitude) from the hinge of the over-suppression term."""
    ref_mag = compressed_magnitude(_tensor(ref).detach().to(torch.complex128), p)
    return lambda est: float(torch.min(torch.abs(compressed_magnitude(est.detach(), p) - ref_mag)))


def grad_check(loss_fn: Callable[[torch.Tensor], torch.Tensor], point: torch.Tensor,
               step: float = 1e-5,
               kink_distance: Optional[Callable[[torch.Tensor], float]] = None) -> float:
    """
    Compare the autograd gradient of ``loss_fn`` at ``point`` with central
    finite differences, in double precision.

    For complex points the real and imaginary parts are perturbed
    separately.

    Args:
        loss_fn: Maps a tensor shaped like ``point`` to a scalar tensor.
        point: Evaluation point (real or complex).
        step: Finite-difference step.
        kink_distance: Optional function returning the distance of a point
            from the loss's non-smooth locus.

    Returns:
        max |analytic - numeric| / max(|analytic|, |numeric|).

    Raises:
        NonSmoothPointError: If the point lies within ``10 * step`` of a
            declared kink, or a complex entry has magnitude below
            ``10 * SMOOTH_EPS``.
    """
    is_complex = point.is_complex()
    point = point.detach().to(torch.complex128 if is_complex else torch.float64)
    if is_complex and float(point.abs().min()) < 10 * SMOOTH_EPS:
        raise NonSmoothPointError("complex point too close to the origin for |s|^p")
    if kink_distance is not None:
        distance = kink_distance(point)
        if distance < 10 * step:
            raise NonSmoothPointError(f"point is {distance:.3g} from a kink (step {step:.3g})")

    def evaluate(flat: torch.Tensor) -> torch.Tensor:
        arg = torch.view_as_complex(flat) if is_complex else flat
        return loss_fn(arg)

    base = (torch.view_as_real(point) if is_complex else point).clone()
    leaf = base.clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(evaluate(leaf), leaf)

    numeric = torch.zeros_like(base)
    flat_base = base.reshape(-1)
    flat_num = numeric.reshape(-1)
    with torch.no_grad():
        for i in range(flat_base.numel()):
            plus = flat_base.clone()
            minus = flat_base.clone()
            plus[i] += step
            minus[i] -= step
            f_plus = evaluate(plus.reshape(base.shape))
            f_minus = evaluate(minus.reshape(base.shape))
            flat_num[i] = (f_plus - f_minus) / (2.0 * step)

    scale = max(float(analytic.abs().max()), float(numeric.abs().max()))
    if scale == 0.0:
        return 0.0
    return float((analytic - numeric).abs().max()) / scale
