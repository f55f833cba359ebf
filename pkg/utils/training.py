"""
Three-stage training schedule.

Stages (in order):

- ``vc``: only the VC module and its discriminators train; the separator
  is frozen. Losses: rec_vc, adv_gen, fm (+ adv_dis on the discriminator).
- ``ss``: only the separator trains. Losses: ss_s, ss_b.
- ``joint``: separator and VC train on the weighted multi-task total.

The bottleneck extractor is frozen in every stage. Each training step is a
generator-side update on the weighted total followed, when the stage
trains the VC side, by a separate discriminator update on adv_dis.
"""

import collections
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Callable, Deque, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from models.bottleneck import BottleneckExtractor, ExtractorHandle, config_hash
from models.config import MtlWeights, RunConfig, STAGE_NAMES
from models.conversion import MultiScaleDiscriminator, VcModel
from models.data_models import _SCHEMA_VERSION, LossBreakdown, TrainingExample, atomic_write
from models.params import param_hash, set_requires_grad
from models.separator import Separator
from utils.dsp import istft_tensor, mel_tensor
from utils.errors import CheckpointError, ConfigError, FrozenStoreError, NumericAbort
from utils.losses import adv_dis, adv_gen, feat_match, make_breakdown, mtl_total, plcpa_asym, rec_uni, rec_vc
from utils.mixing import Batch, batch_for_step
from utils.pipeline import PipelineModels

logger = logging.getLogger(__name__)

STORES = ("separator", "vc", "discriminator", "extractor")
TRAINABLE_STORES = ("separator", "vc", "discriminator")
CHECKPOINT_KIND = "train-state"

STAGE_IDS = {"vc": "vc_only", "ss": "ss_only", "joint": "joint"}


@dataclass(frozen=True)
class StagePlan:
    """
    What one stage trains and how.

    Attributes:
        stage: "vc", "ss" or "joint".
        frozen: Parameter stores that must not change during the stage.
        weights: Multi-task weights after stage selection and ablation.
        steps: Step budget.
        update_discriminator: Run the alternating discriminator update.
        skipped: The stage has no objective left (removed by an ablation).
    """
    stage: str
    frozen: FrozenSet[str]
    weights: MtlWeights
    steps: int
    update_discriminator: bool
    skipped: bool = False

    @property
    def stage_id(self) -> str:
        return STAGE_IDS[self.stage]

    @property
    def trainable(self) -> Tuple[str, ...]:
        return tuple(s for s in TRAINABLE_STORES if s not in self.frozen)

    @property
    def active_terms(self) -> Tuple[str, ...]:
        terms = []
        if self.weights.lambda_uni:
            terms.append("rec_uni")
        if self.weights.lambda_ss:
            terms += ["ss_s", "ss_b"]
        if self.weights.lambda_vc:
            terms += ["rec_vc", "adv_gen", "fm"]
        if self.update_discriminator:
            terms.append("adv_dis")
        return tuple(terms)


def make_plan(stage: str, cfg: RunConfig, steps: Optional[int] = None) -> StagePlan:
    """
    Build the plan of ``stage`` under ``cfg``, applying ``training.ablate``.

    ``ss-loss`` removes ss_s / ss_b everywhere (the ss stage is skipped),
    ``vc-loss`` removes rec_vc / adv_gen / fm and the discriminator update
    everywhere (the vc stage is skipped), ``no-joint`` skips the joint stage.

    Raises:
        ConfigError: For an unknown stage name.
    """
    if stage not in STAGE_NAMES:
        raise ConfigError(f"unknown stage '{stage}' (expected one of {STAGE_NAMES})")
    w = cfg.losses.weights
    ablate = cfg.training.ablate
    lam_ss = 0.0 if ablate == "ss-loss" else w.lambda_ss
    lam_vc = 0.0 if ablate == "vc-loss" else w.lambda_vc
    if stage == "vc":
        weights = MtlWeights(0.0, 0.0, lam_vc)
        frozen = {"separator", "extractor"}
    elif stage == "ss":
        weights = MtlWeights(0.0, lam_ss, 0.0)
        frozen = {"vc", "discriminator", "extractor"}
    else:
        weights = MtlWeights(w.lambda_uni, lam_ss, lam_vc)
        frozen = {"extractor"}
    if lam_vc == 0:
        frozen.add("discriminator")
    skipped = (
        (stage == "joint" and ablate == "no-joint")
        or (weights.lambda_uni == 0 and weights.lambda_ss == 0 and weights.lambda_vc == 0)
    )
    return StagePlan(
        stage=stage,
        frozen=frozenset(frozen),
        weights=weights,
        steps=cfg.training.steps_for(stage) if steps is None else steps,
        update_discriminator=lam_vc > 0 and stage != "ss",
        skipped=skipped,
    )


def set_determinism(seed: int, deterministic: bool = True) -> None:
    """Seed every RNG; in determinism mode also force single-threaded, deterministic kernels."""
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.set_num_threads(1)


class TrainState:
    """
    Every parameter store plus optimizer, scheduler and progress state.

    Attributes:
        cfg: Run configuration.
        separator / vc / discriminator: Trainable stores.
        extractor: Frozen bottleneck extractor handle.
        optimizers / schedulers: One AdamW + ExponentialLR per trainable store.
        step: Global step counter across stages.
        stage: Current (or last) stage name.
        stage_step: Steps completed in the current stage.
        history: The most recent LossBreakdowns.
    """

    def __init__(self, cfg: RunConfig, speaker_ids: Sequence[str],
                 extractor: Optional[ExtractorHandle] = None):
        self.cfg = cfg
        self.extractor = extractor or ExtractorHandle.seeded_default(cfg.bottleneck, cfg.audio)
        if self.extractor.config_hash != config_hash(cfg.bottleneck, cfg.audio):
            raise ConfigError("extractor architecture does not match the run config")
        self.separator = Separator(cfg.separator, cfg.audio.frame)
        self.vc = VcModel(cfg.vc, cfg.bottleneck.feature_dim, speaker_ids)
        self.discriminator = MultiScaleDiscriminator(cfg.vc)
        tc = cfg.training
        self.optimizers: Dict[str, torch.optim.Optimizer] = {}
        self.schedulers: Dict[str, torch.optim.lr_scheduler.LRScheduler] = {}
        for name in TRAINABLE_STORES:
            opt = torch.optim.AdamW(self.store(name).parameters(), lr=tc.learning_rate, betas=tuple(tc.betas))
            self.optimizers[name] = opt
            self.schedulers[name] = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=tc.lr_decay)
        self.step = 0
        self.stage = ""
        self.stage_step = 0
        self.history: Deque[LossBreakdown] = collections.deque(maxlen=tc.history_size)

    @property
    def speaker_ids(self) -> List[str]:
        return list(self.vc.speakers.ids)

    def store(self, name: str) -> nn.Module:
        if name == "extractor":
            return self.extractor.module
        return getattr(self, name)

    def hashes(self, names: Sequence[str] = STORES) -> Dict[str, str]:
        return {name: param_hash(self.store(name)) for name in names}

    def models(self) -> PipelineModels:
        return PipelineModels(separator=self.separator, extractor=self.extractor, vc=self.vc)


# ---------------------------------------------------------------------------
# One step
# ---------------------------------------------------------------------------

def _check_finite(terms: Dict[str, torch.Tensor], step: int) -> None:
    for name, value in terms.items():
        v = float(value.detach())
        if not math.isfinite(v):
            raise NumericAbort(name, step, v)


def _separate(state: TrainState, batch: Batch) -> Tuple[torch.Tensor, torch.Tensor]:
    mask_s, mask_b = state.separator(batch.mix_spec)
    return batch.mix_spec * mask_s, batch.mix_spec * mask_b


def _vc_terms(state: TrainState, fake: torch.Tensor, batch: Batch, terms: Dict[str, torch.Tensor]) -> None:
    frame, mel = state.cfg.audio.frame, state.cfg.audio.mel
    terms["rec_vc"] = rec_vc(mel_tensor(fake, frame, mel, log_scale=True), batch.speech_mel)
    d_fake = state.discriminator(fake)
    d_real = state.discriminator(batch.speech)
    terms["adv_gen"] = adv_gen(d_fake.scores)
    terms["fm"] = feat_match(d_real.features, d_fake.features)


def generator_loss(state: TrainState, batch: Batch, plan: StagePlan
                   ) -> Tuple[torch.Tensor, Dict[str, torch.Tensor], Optional[torch.Tensor]]:
    """
    Forward pass of the generator-side objective of ``plan``.

    Returns:
        (weighted total, term tensors, generated speech or None)
    """
    cfg = state.cfg
    frame, n = cfg.audio.frame, batch.mix.shape[-1]
    plcpa_cfg = cfg.losses.plcpa
    w = plan.weights
    terms: Dict[str, torch.Tensor] = {}
    fake = None
    speakers = state.vc.speakers.indices(batch.speaker_ids)

    if plan.stage == "vc":
        if cfg.training.vc_input == "separated":
            with torch.no_grad():
                est_s, _ = _separate(state, batch)
                vc_in = istft_tensor(est_s, frame, n)
        else:
            vc_in = batch.speech
        with torch.no_grad():
            bn = state.extractor.module.extract_tensor(vc_in)
        fake = state.vc(bn, speakers)[:, :n]
        _vc_terms(state, fake, batch, terms)
    elif plan.stage == "ss":
        est_s, est_b = _separate(state, batch)
        terms["ss_s"] = plcpa_asym(est_s, batch.speech_spec, plcpa_cfg)
        terms["ss_b"] = plcpa_asym(est_b, batch.background_spec, plcpa_cfg)
    else:
        est_s, est_b = _separate(state, batch)
        if w.lambda_ss:
            terms["ss_s"] = plcpa_asym(est_s, batch.speech_spec, plcpa_cfg)
            terms["ss_b"] = plcpa_asym(est_b, batch.background_spec, plcpa_cfg)
        sep_speech = istft_tensor(est_s, frame, n)
        sep_background = istft_tensor(est_b, frame, n)
        bn = state.extractor.module.extract_tensor(sep_speech)
        # reconstruction: the target speaker is the source speaker
        fake = state.vc(bn, speakers)[:, :n]
        recomposed = fake + sep_background
        terms["rec_uni"] = rec_uni(mel_tensor(recomposed, frame, cfg.audio.mel, log_scale=True), batch.mix_mel)
        if w.lambda_vc:
            _vc_terms(state, fake, batch, terms)
    return mtl_total(terms, w), terms, fake


def train_step(state: TrainState, batch: Batch, plan: StagePlan) -> LossBreakdown:
    """
    One generator-side update on the weighted total, then (if the plan says
    so) one discriminator update on adv_dis.

    Raises:
        NumericAbort: If a loss term or gradient is NaN / Inf.
    """
    step = state.step
    for name in TRAINABLE_STORES:
        set_requires_grad(state.store(name), name not in plan.frozen)
        state.optimizers[name].zero_grad(set_to_none=True)

    total, terms, fake = generator_loss(state, batch, plan)
    _check_finite(terms, step)
    if torch.is_tensor(total) and total.requires_grad:
        total.backward()
    for name in plan.trainable:
        if name == "discriminator":
            continue
        for p in state.store(name).parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericAbort(f"grad:{name}", step, float("nan"))
        state.optimizers[name].step()
        state.schedulers[name].step()

    if plan.update_discriminator and fake is not None:
        opt = state.optimizers["discriminator"]
        opt.zero_grad(set_to_none=True)
        d_real = state.discriminator(batch.speech)
        d_fake = state.discriminator(fake.detach())
        loss_d = adv_dis(d_real.scores, d_fake.scores)
        _check_finite({"adv_dis": loss_d}, step)
        loss_d.backward()
        opt.step()
        state.schedulers["discriminator"].step()
        terms["adv_dis"] = loss_d

    state.step += 1
    state.stage = plan.stage
    state.stage_step += 1
    breakdown = make_breakdown(terms, plan.weights, step=step, stage=plan.stage)
    state.history.append(breakdown)
    return breakdown


def step_joint(state: TrainState, batch: Batch) -> Tuple[TrainState, LossBreakdown]:
    """
    One joint-stage step.

    Raises:
        ValueError: If the run's ablation removes the joint stage.
    """
    plan = make_plan("joint", state.cfg)
    if plan.skipped:
        raise ValueError("the joint stage is disabled by the 'no-joint' ablation")
    return state, train_step(state, batch, plan)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

class LossLogWriter:
    """Appends one JSON line per LossBreakdown."""

    def __init__(self, path: str):
        self.path = path
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def __call__(self, breakdown: LossBreakdown) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(breakdown.to_json_line() + "\n")


def _verify_frozen(state: TrainState, expected: Dict[str, str], plan: StagePlan) -> None:
    now = state.hashes(list(expected))
    for name, value in expected.items():
        if now[name] != value:
            raise FrozenStoreError(name, plan.stage)


def run_stage(plan: StagePlan, state: TrainState, examples: Sequence[TrainingExample],
              log_fn: Optional[Callable[[LossBreakdown], None]] = None,
              checkpoint_dir: Optional[str] = None, max_steps: Optional[int] = None) -> TrainState:
    """
    Run ``plan.steps`` steps (resuming from ``state.stage_step`` when the
    state is already in this stage).

    Args:
        plan: Stage plan.
        state: Training state, updated in place and returned.
        examples: Training examples; batches depend only on (seed, step).
        log_fn: Called with every LossBreakdown.
        checkpoint_dir: If set, ``latest.pt`` is written every
            ``checkpoint_every`` steps.
        max_steps: Stop after this many steps of this call.

    Raises:
        NumericAbort: On a non-finite loss term.
        FrozenStoreError: If a frozen store changes.
    """
    if plan.skipped:
        logger.info("[Stage %s] skipped (ablation: %s)", plan.stage, state.cfg.training.ablate)
        return state
    if not examples:
        raise ValueError("no training examples")
    if state.stage != plan.stage:
        state.stage, state.stage_step = plan.stage, 0
    cfg = state.cfg
    tc = cfg.training
    frozen_hashes = state.hashes(sorted(plan.frozen))
    logger.info("[Freeze] stage %s (%s): frozen %s, trainable %s",
                plan.stage, plan.stage_id, sorted(plan.frozen), list(plan.trainable))

    start = state.stage_step
    end = plan.steps if max_steps is None else min(plan.steps, start + max_steps)
    state.separator.train()
    state.vc.train()
    for _ in tqdm(range(start, end), desc=f"stage {plan.stage}", disable=None, leave=False):
        batch = batch_for_step(examples, state.step, cfg.data, cfg.audio.frame, cfg.audio.mel, tc.seed)
        breakdown = train_step(state, batch, plan)
        if log_fn is not None:
            log_fn(breakdown)
        if state.stage_step % tc.log_every == 0:
            logger.info("[Stage %s] step %d/%d total %.5f", plan.stage, state.stage_step, plan.steps,
                        breakdown.total)
        if state.stage_step % tc.freeze_check_every == 0:
            _verify_frozen(state, frozen_hashes, plan)
        if checkpoint_dir and state.stage_step % tc.checkpoint_every == 0:
            save_checkpoint(state, os.path.join(checkpoint_dir, "latest.pt"))
    _verify_frozen(state, frozen_hashes, plan)
    state.separator.eval()
    state.vc.eval()
    return state


def run_schedule(state: TrainState, examples: Sequence[TrainingExample],
                 stages: Sequence[str] = STAGE_NAMES,
                 log_fn: Optional[Callable[[LossBreakdown], None]] = None,
                 checkpoint_dir: Optional[str] = None) -> TrainState:
    """Run ``stages`` in order, checkpointing each as ``<stage>.pt`` and ``latest.pt``."""
    extractor_hash = state.extractor.param_hash()
    for stage in stages:
        plan = make_plan(stage, state.cfg)
        run_stage(plan, state, examples, log_fn, checkpoint_dir)
        if state.extractor.param_hash() != extractor_hash:
            raise FrozenStoreError("extractor", stage)
        if checkpoint_dir and not plan.skipped:
            save_checkpoint(state, os.path.join(checkpoint_dir, f"{stage}.pt"))
            save_checkpoint(state, os.path.join(checkpoint_dir, "latest.pt"))
            logger.info("[Saved] stage %s checkpoint in %s", stage, checkpoint_dir)
    return state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _numpy_rng_json() -> str:
    _, keys, pos, has_gauss, cached = np.random.get_state()
    return json.dumps({"keys": keys.tolist(), "pos": int(pos),
                       "has_gauss": int(has_gauss), "cached": float(cached)})


def _restore_numpy_rng(payload: str) -> None:
    data = json.loads(payload)
    np.random.set_state(("MT19937", np.array(data["keys"], dtype=np.uint32),
                         data["pos"], data["has_gauss"], data["cached"]))


def save_checkpoint(state: TrainState, path: str) -> None:
    """Write the full training state atomically."""
    blob = {
        "version": _SCHEMA_VERSION,
        "kind": CHECKPOINT_KIND,
        "config": state.cfg.to_dict(),
        "speakers": state.speaker_ids,
        "stores": {name: state.store(name).state_dict() for name in TRAINABLE_STORES},
        "extractor": {
            "state_dict": state.extractor.module.state_dict(),
            "provenance": state.extractor.provenance,
            "config_hash": state.extractor.config_hash,
        },
        "optimizers": {name: opt.state_dict() for name, opt in state.optimizers.items()},
        "schedulers": {name: sch.state_dict() for name, sch in state.schedulers.items()},
        "step": state.step,
        "stage": state.stage,
        "stage_step": state.stage_step,
        "history": [b.to_dict() for b in state.history],
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": _numpy_rng_json(),
    }
    atomic_write(path, lambda f: torch.save(blob, f), binary=True)


def _read_blob(path: str) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Cannot read checkpoint '{path}': {e}")
    if not isinstance(blob, dict) or blob.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"'{path}' is not a training checkpoint")
    version = blob.get("version", 1)
    if version > _SCHEMA_VERSION:
        raise CheckpointError(
            f"'{path}' was written by a newer version of this tool "
            f"(file version {version}, current version {_SCHEMA_VERSION})."
        )
    return blob


def load_checkpoint(path: str, cfg: Optional[RunConfig] = None) -> TrainState:
    """
    Restore a training state.

    Args:
        path: Checkpoint file.
        cfg: Optional run config; its architecture must match the
            checkpoint's. Training hyperparameters are taken from ``cfg``
            when given, else from the checkpoint.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        CheckpointError: On a corrupt or newer file, or an architecture mismatch.
    """
    blob = _read_blob(path)
    try:
        saved = RunConfig.from_dict(blob["config"])
    except (KeyError, ConfigError) as e:
        raise CheckpointError(f"'{path}' has an invalid config: {e}")
    if cfg is not None and cfg.architecture_dict() != saved.architecture_dict():
        raise CheckpointError(f"'{path}' was trained with a different architecture config")
    cfg = cfg or saved

    extractor_module = BottleneckExtractor(cfg.bottleneck, cfg.audio)
    try:
        extractor_module.load_state_dict(blob["extractor"]["state_dict"])
        extractor = ExtractorHandle(extractor_module, blob["extractor"]["provenance"])
        state = TrainState(cfg, blob["speakers"], extractor)
        for name in TRAINABLE_STORES:
            state.store(name).load_state_dict(blob["stores"][name])
            state.optimizers[name].load_state_dict(blob["optimizers"][name])
            state.schedulers[name].load_state_dict(blob["schedulers"][name])
    except (KeyError, RuntimeError, ValueError) as e:
        raise CheckpointError(f"'{path}': parameter stores do not match the config: {e}")

    state.step = int(blob["step"])
    state.stage = blob["stage"]
    state.stage_step = int(blob["stage_step"])
    for entry in blob["history"]:
        state.history.append(LossBreakdown.from_dict(entry))
    torch.set_rng_state(blob["torch_rng"])
    _restore_numpy_rng(blob["numpy_rng"])
    state.separator.eval()
    state.vc.eval()
    return state


def checkpoint_info(path: str) -> dict:
    """Version, stage, step and per-store parameter hashes of a checkpoint."""
    state = load_checkpoint(path)
    blob = _read_blob(path)
    return {
        "version": blob.get("version", 1),
        "stage": state.stage,
        "step": state.step,
        "speakers": state.speaker_ids,
        "extractor_provenance": state.extractor.provenance,
        "hashes": state.hashes(),
    }


def load_models(path: str) -> Tuple[PipelineModels, RunConfig]:
    """Inference models and config stored in a checkpoint."""
    state = load_checkpoint(path)
    return state.models().eval(), state.cfg


__all__ = [
    "StagePlan",
    "TrainState",
    "make_plan",
    "run_stage",
    "run_schedule",
    "train_step",
    "step_joint",
    "generator_loss",
    "save_checkpoint",
    "load_checkpoint",
    "load_models",
    "checkpoint_info",
    "set_determinism",
    "LossLogWriter",
]
