"""
Subcommand implementations.

Each ``cmd_*`` function takes the parsed arguments and returns an exit code;
``run`` maps the error families to the stable exit codes:

- 0 success
- 1 usage or configuration error
- 2 data error (bad audio, missing files, unknown speaker, bad checkpoint)
- 3 numeric abort (NaN / Inf loss during training)
- 4 a frozen parameter store changed during a training stage

Run directory written by ``train``::

    <run_dir>/config.yaml           resolved configuration snapshot
    <run_dir>/run.log               log file
    <run_dir>/train_log.jsonl       one LossBreakdown per step
    <run_dir>/checkpoints/<stage>.pt and latest.pt
    <run_dir>/figures/              loss curves
    <run_dir>/run_manifest.json     seed, argv, stages, creation time
"""

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from typing import Dict, List, Optional, Sequence

from models.bottleneck import ExtractorHandle, load_external
from models.config import ABLATIONS, STAGE_NAMES, RunConfig
from models.data_models import _SCHEMA_VERSION, Manifest, atomic_write_json
from utils.dsp import read_wav, write_wav
from utils.errors import CheckpointError, ConfigError, DataError, FrozenStoreError, NumericAbort
from utils.evaluation import ExternalScorer, evaluate_system, oracle_separation, unprocessed_report, write_report
from utils.figures import emit_figures
from utils.log_setup import configure_logging
from utils.mixing import build_mixture_set, build_toy_corpus, load_examples
from utils.pipeline import VC_STUBS, convert_parts
from utils.training import (
    LossLogWriter,
    TrainState,
    checkpoint_info,
    load_checkpoint,
    load_models,
    run_schedule,
    set_determinism,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_FREEZE = 4

PROG = "bgvc"


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises ConfigError instead of exiting on bad usage."""

    def error(self, message: str):
        raise ConfigError(f"{self.prog}: {message}")


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.resolve(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.training.seed = args.seed
    return cfg


def _write_run_manifest(run_dir: str, cfg: RunConfig, argv: Sequence[str], stages: Sequence[str]) -> None:
    atomic_write_json(os.path.join(run_dir, "run_manifest.json"), {
        "version": _SCHEMA_VERSION,
        "seed": cfg.training.seed,
        "argv": list(argv),
        "stages": list(stages),
        "ablate": cfg.training.ablate,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    })


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_toy_corpus(args: argparse.Namespace) -> int:
    speech, background = build_toy_corpus(args.out, seed=args.seed, n_utterances=args.n_utterances,
                                          n_backgrounds=args.n_backgrounds)
    print(speech)
    print(background)
    return EXIT_OK


def cmd_mix(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    snr_min = cfg.data.snr_min if args.snr_min is None else args.snr_min
    snr_max = cfg.data.snr_max if args.snr_max is None else args.snr_max
    if snr_min > snr_max:
        raise ConfigError(f"--snr-min ({snr_min}) is greater than --snr-max ({snr_max})")
    if args.n < 0:
        raise ConfigError("--n must be >= 0")
    speech = Manifest.load_jsonl(args.speech_manifest)
    background = Manifest.load_jsonl(args.background_manifest)
    path = build_mixture_set(speech, background, args.n, args.out, cfg.data,
                             seed=args.seed if args.seed is not None else cfg.training.seed,
                             snr_range=(snr_min, snr_max))
    print(path)
    return EXIT_OK


def cmd_train(args: argparse.Namespace, argv: Sequence[str] = ()) -> int:
    cfg = _load_config(args)
    if args.ablate is not None:
        cfg.training.ablate = args.ablate
    if args.steps is not None:
        cfg.training.vc_steps = cfg.training.ss_steps = cfg.training.joint_steps = args.steps
    cfg.validate()

    run_dir = args.run_dir
    os.makedirs(run_dir, exist_ok=True)
    configure_logging(args.log_level, os.path.join(run_dir, "run.log"))
    stages = list(STAGE_NAMES) if args.stage == "all" else [args.stage]
    cfg.save_yaml(os.path.join(run_dir, "config.yaml"))
    _write_run_manifest(run_dir, cfg, argv, stages)

    set_determinism(cfg.training.seed, cfg.training.deterministic)
    examples = load_examples(args.data)
    if not examples:
        raise DataError(f"'{args.data}' holds no mixtures")
    speakers = sorted({ex.speaker_id for ex in examples})

    if args.resume:
        state = load_checkpoint(args.resume, cfg)
        logger.info("[Resume] %s at stage %s step %d", args.resume, state.stage, state.step)
    else:
        extractor = (load_external(args.extractor, cfg.bottleneck.feature_dim) if args.extractor
                     else ExtractorHandle.seeded_default(cfg.bottleneck, cfg.audio))
        state = TrainState(cfg, speakers, extractor)

    log_path = os.path.join(run_dir, "train_log.jsonl")
    run_schedule(state, examples, stages, LossLogWriter(log_path), os.path.join(run_dir, "checkpoints"))
    if os.path.exists(log_path) and os.path.getsize(log_path):
        emit_figures(log_path, None, os.path.join(run_dir, "figures"), cfg.evaluation)
    logger.info("[Done] %s", run_dir)
    return EXIT_OK


def cmd_convert(args: argparse.Namespace) -> int:
    if args.target_speaker is None and args.vc_stub is None:
        raise ConfigError("--target-speaker is required unless --vc-stub is given")
    models, _ = load_models(args.checkpoint)
    os.makedirs(args.out_dir, exist_ok=True)
    for path in args.input:
        mix = read_wav(path)
        parts = convert_parts(mix, args.target_speaker, models, keep_background=args.keep_background,
                              vc_stub=args.vc_stub)
        stem = os.path.splitext(os.path.basename(path))[0]
        suffix = args.target_speaker or args.vc_stub
        out_path = os.path.join(args.out_dir, f"{stem}_{suffix}.wav")
        write_wav(parts.output, out_path)
        logger.info("[Convert] %s -> %s (background %s)", path, out_path,
                    "kept" if args.keep_background else "removed")
        print(out_path)
    return EXIT_OK


def _parse_checkpoints(values: Optional[List[str]]) -> Dict[str, str]:
    systems: Dict[str, str] = {}
    for value in values or []:
        name, sep, path = value.partition("=")
        if not sep:
            name, path = os.path.splitext(os.path.basename(value))[0], value
        if not name or not path:
            raise ConfigError(f"--checkpoint expects NAME=PATH, got '{value}'")
        if name in systems:
            raise ConfigError(f"system name '{name}' given twice")
        systems[name] = path
    return systems


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    systems = _parse_checkpoints(args.checkpoint)
    if not systems and not args.oracle and not args.upper_bound:
        raise ConfigError("give at least one --checkpoint, --oracle or --upper-bound")
    command = args.pesq_command or cfg.evaluation.pesq_command
    scorer = ExternalScorer(command) if command else None
    cap = cfg.evaluation.si_sdr_cap_db

    reports = []
    if args.baseline:
        reports.append(unprocessed_report(args.data, cap))
    if args.oracle:
        reports.append(evaluate_system(None, args.data, os.path.join(args.out_dir, "oracle"), system="oracle",
                                       separate_fn=oracle_separation, scorer=scorer, cap_db=cap))
    if args.upper_bound:
        reports.append(evaluate_system(args.upper_bound, args.data, os.path.join(args.out_dir, "upper_bound"),
                                       system="upper_bound", target_speaker=args.target_speaker,
                                       scorer=scorer, cap_db=cap, upper_bound=True))
    for name, path in systems.items():
        reports.append(evaluate_system(path, args.data, os.path.join(args.out_dir, name), system=name,
                                       target_speaker=args.target_speaker, scorer=scorer, cap_db=cap))

    merged = reports[0]
    for report in reports[1:]:
        merged = merged.merged(report)
    write_report(merged, args.out_dir)
    if args.train_log:
        emit_figures(args.train_log, merged, os.path.join(args.out_dir, "figures"), cfg.evaluation)
    for entry in merged.summary_table():
        logger.info("[Eval] %s", entry)
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    print(json.dumps(checkpoint_info(args.checkpoint), indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> CliParser:
    parser = CliParser(prog=PROG, description="Voice conversion that keeps (or removes) background sound.")
    parser.add_argument("--config", help="YAML config file (default: $BGVC_CONFIG, else built-in defaults)")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", parser_class=CliParser)
    sub.required = True

    p = sub.add_parser("toy-corpus", help="write the synthetic two-speaker corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-utterances", type=int, default=8)
    p.add_argument("--n-backgrounds", type=int, default=4)
    p.set_defaults(func=cmd_toy_corpus)

    p = sub.add_parser("mix", help="build an SNR-controlled mixture set")
    p.add_argument("--speech-manifest", required=True)
    p.add_argument("--background-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--snr-min", type=float)
    p.add_argument("--snr-max", type=float)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("train", help="run one stage or the full vc -> ss -> joint schedule")
    p.add_argument("--data", required=True, help="mixture manifest (mixtures.jsonl)")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--stage", choices=list(STAGE_NAMES) + ["all"], default="all")
    p.add_argument("--ablate", choices=list(ABLATIONS))
    p.add_argument("--steps", type=int, help="override every stage budget")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--extractor", help="external bottleneck extractor container")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="convert WAV files with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--target-speaker")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--keep-background", dest="keep_background", action="store_true", default=True)
    group.add_argument("--no-background", dest="keep_background", action="store_false")
    p.add_argument("--vc-stub", choices=list(VC_STUBS))
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="score separation quality and write reports")
    p.add_argument("--data", required=True, help="mixture manifest (mixtures.jsonl)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--checkpoint", action="append", metavar="NAME=PATH")
    p.add_argument("--oracle", action="store_true", help="also score the references themselves")
    p.add_argument("--baseline", action="store_true", help="also score the unprocessed mixture")
    p.add_argument("--upper-bound", metavar="PATH",
                   help="checkpoint whose VC module converts the clean speech, background added back")
    p.add_argument("--target-speaker", help="convert and record the mel L1 diagnostic")
    p.add_argument("--pesq-command", help="external scorer invoked as CMD ref.wav est.wav")
    p.add_argument("--train-log", help="training log for loss-curve figures")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print checkpoint version, stage, step and hashes")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv`` and run the command; returns the exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command != "train":
            configure_logging(args.log_level)
        if args.func is cmd_train:
            return cmd_train(args, argv)
        return args.func(args)
    except ConfigError as e:
        logger.error("[Config] %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as e:
        logger.error("[Abort] %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FrozenStoreError as e:
        logger.error("[Freeze] %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FREEZE
    except (DataError, CheckpointError, FileNotFoundError) as e:
        logger.error("[Data] %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
