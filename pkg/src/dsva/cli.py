"""Command-line entry point: data generation, both training phases, evaluation and checks."""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence

from dotenv import load_dotenv

from .club import club_bench
from .config import RunConfig, apply_overrides, load_config
from .datasetio import read_dataset, write_dataset
from .errors import ContractError, FormatError, UsageError
from .evaluation import evaluate
from .gradcheck import format_report, run_suite
from .synthdata import GenerationConfig, build_dataset
from .training import ABLATIONS, load_model, run_ablation, run_phase1, run_phase2

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
EVAL_SEED_OFFSET = 10_000


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so main() owns the exit code."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def configure_logging(level: str, log_dir: Optional[Path] = None) -> logging.Logger:
    """
    Attach a console handler, and a train.log handler when log_dir is given, to the
    package logger.
    """
    root = logging.getLogger("dsva")
    try:
        root.setLevel(level.upper())
    except ValueError:
        raise UsageError(f"unknown log level {level!r}") from None
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    formatter = logging.Formatter(LOG_FORMAT)
    console = logging.StreamHandler()
    console.setFormatter(formatter)
    root.addHandler(console)
    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_dir / "train.log")
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)
    return root


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="INI run configuration")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one config value (repeatable)",
    )
    parser.add_argument("--log-level", help="Logging level (default: DSVA_LOG_LEVEL or INFO)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dsva", description="Decoupled text/visual prompting on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="Generate synthetic scene datasets")
    _add_config_options(p)
    p.add_argument("--seed", type=int, help="Dataset seed (default: run.seed)")
    p.add_argument("--scenes", type=int, help="Scene count for --out")
    p.add_argument("--out", type=Path, help="Write one dataset here instead of train and eval")

    p = sub.add_parser("pretrain-text", help="Phase 1: text-understanding pre-training")
    _add_config_options(p)

    p = sub.add_parser("train-decouple", help="Phase 2: decoupling with a frozen text path")
    _add_config_options(p)
    p.add_argument("--checkpoint", type=Path, help="Phase-1 checkpoint")

    p = sub.add_parser("eval", help="Evaluate a checkpoint on the eval dataset")
    _add_config_options(p)
    p.add_argument("--checkpoint", type=Path, help="Checkpoint to evaluate")
    p.add_argument("--dataset", type=Path, help="Dataset file (default: data.eval_path)")
    p.add_argument("--iterations", type=int, help="Self-feedback rounds T")
    p.add_argument("--hard", action="store_true", help="Threshold fed-back masks at 0.5")
    p.add_argument("--dump-masks", type=Path, help="Write PGM masks per scene here")

    p = sub.add_parser("club-bench", help="CLUB estimate on correlated Gaussians")
    _add_config_options(p)
    p.add_argument("--rhos", type=float, nargs="+", default=[0.0, 0.5, 0.9])
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--learning-rate", type=float, default=0.02)

    p = sub.add_parser("grad-check", help="Finite-difference check of every differentiable op")
    _add_config_options(p)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=24)

    p = sub.add_parser("ablate", help="Full method against degraded variants")
    _add_config_options(p)
    p.add_argument("--variants", nargs="+", default=list(ABLATIONS), choices=ABLATIONS)
    return parser


def _load(args: argparse.Namespace, fallback: Optional[Path] = None) -> RunConfig:
    if args.config is not None:
        config = load_config(args.config)
    elif fallback is not None and fallback.exists():
        config = load_config(fallback)
    else:
        config = RunConfig()
    return apply_overrides(config, args.overrides)


def _log_level(args: argparse.Namespace, config: RunConfig) -> str:
    return args.log_level or os.getenv("DSVA_LOG_LEVEL") or config.run.log_level


def _print_json(data: Dict[str, Any]) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = _load(args)
    configure_logging(_log_level(args, config))
    d = config.data
    spec = GenerationConfig(
        image_size=d.image_size, min_objects=d.min_objects, max_objects=d.max_objects
    )
    seed = config.run.seed if args.seed is None else args.seed
    if args.out is not None:
        jobs = [(args.out, seed, d.train_scenes if args.scenes is None else args.scenes)]
    else:
        jobs = [
            (Path(d.train_path), seed, d.train_scenes),
            (Path(d.eval_path), seed + EVAL_SEED_OFFSET, d.eval_scenes),
        ]
    for path, job_seed, count in jobs:
        dataset = build_dataset(job_seed, count, spec, d.latent_dim, d.sigma_noise, d.mixing_seed)
        write_dataset(dataset, path)
        logger.info("wrote %d scenes (seed %d) to %s", count, job_seed, path)
    return 0


def cmd_pretrain_text(args: argparse.Namespace) -> int:
    config = _load(args)
    config.run.phase = "pretrain_text"
    configure_logging(_log_level(args, config), config.output_dir)
    record = run_phase1(config)
    logger.info("phase-1 checkpoint: %s", record.checkpoint)
    if record.final_eval is not None:
        _print_json(dict(record.final_eval))
    return 0


def cmd_train_decouple(args: argparse.Namespace) -> int:
    config = _load(args)
    config.run.phase = "train_decouple"
    configure_logging(_log_level(args, config), config.output_dir)
    checkpoint = args.checkpoint or (
        Path(config.train.phase1_checkpoint) if config.train.phase1_checkpoint else None
    )
    record = run_phase2(config, checkpoint)
    logger.info("phase-2 checkpoint: %s", record.checkpoint)
    if record.final_eval is not None:
        _print_json(dict(record.final_eval))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = args.checkpoint
    if checkpoint is None:
        # the checkpoint can also come from eval.checkpoint in --config
        config = _load(args)
        if not config.eval.checkpoint:
            raise UsageError("eval needs --checkpoint or eval.checkpoint")
        checkpoint = Path(config.eval.checkpoint)
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    config = _load(args, fallback=checkpoint.parent / "config.ini")
    config.run.phase = "eval"
    config.validate()
    configure_logging(_log_level(args, config))

    dataset = read_dataset(args.dataset or config.data.eval_path)
    model, text_only = load_model(config, checkpoint)
    dump_dir = args.dump_masks or (Path(config.eval.dump_masks) if config.eval.dump_masks else None)
    report = evaluate(
        model,
        dataset,
        iterations=config.eval.iterations if args.iterations is None else args.iterations,
        hard=args.hard or config.eval.hard_reprompt,
        text_only=text_only,
        dump_dir=dump_dir,
        batch_size=config.eval.batch_size,
    )
    _print_json(dict(report))
    return 0


def cmd_club_bench(args: argparse.Namespace) -> int:
    config = _load(args)
    configure_logging(_log_level(args, config))
    rows = club_bench(args.rhos, args.samples, args.steps, args.learning_rate, config.run.seed)
    print(f"{'rho':>6} {'true MI':>10} {'analytic':>10} {'estimate':>10}")
    for row in rows:
        print(
            f"{row['rho']:>6.2f} {row['true_mi']:>10.4f} "
            f"{row['analytic_club']:>10.4f} {row['estimate']:>10.4f}"
        )
    return 0


def cmd_grad_check(args: argparse.Namespace) -> int:
    config = _load(args)
    configure_logging(_log_level(args, config))
    reports = run_suite(config.run.seed, args.tolerance, args.max_coords)
    print(format_report(reports))
    return 0 if all(r.passed for r in reports) else 1


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _load(args)
    configure_logging(_log_level(args, config), config.output_dir)
    reports = run_ablation(config, variants=tuple(args.variants))
    header = f"{'variant':<12} {'fused':>7} {'text':>7} {'visual':>7} {'t->t':>7} {'t->v':>7}"
    print(header)
    for variant, report in reports.items():
        cells = [
            report.get(key)
            for key in ("fused_miou", "text_miou", "visual_miou",
                        "probe_text_to_text", "probe_text_to_vis")
        ]
        print(f"{variant:<12} " + " ".join(
            f"{value:>7.3f}" if value is not None else f"{'-':>7}" for value in cells
        ))
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "gen-data": cmd_gen_data,
    "pretrain-text": cmd_pretrain_text,
    "train-decouple": cmd_train_decouple,
    "eval": cmd_eval,
    "club-bench": cmd_club_bench,
    "grad-check": cmd_grad_check,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand.

    Returns:
        0 on success, 1 on a contract or usage error, 2 on an I/O or format error
    """
    load_dotenv()
    try:
        args = build_parser().parse_args(None if argv is None else list(argv))
        return COMMANDS[args.command](args)
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
