"""Two-phase training runs: metrics stream, checkpoints and the ablation runner."""

import copy
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from . import diffcore as dc
from .checkpoint import load_checkpoint, parameter_checksum, save_checkpoint
from .club import ClubSchedule, Phase, alternate, fit_q_step
from .config import RunConfig, save_config
from .datasetio import read_dataset
from .errors import ConfigError, ContractError, NumericError, TrainingError
from .evaluation import evaluate
from .model import DSVAModel, has_decoupling_stage, loss_weights
from .optim import Optimizer, OptimizerState
from .segcore import pretrain_text_step
from .synthdata import Dataset, make_batch
from .types import EvalReport, MetricRow

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PROBE_SCENES = 500
ABLATIONS = ("full", "zero_aux", "no_pretrain", "no_reprompt")


def atomic_write_json(path: Path, data: Dict[str, Any]) -> None:
    """Write JSON via temp file, fsync and rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


class MetricsWriter:
    """
    Line-delimited JSON metrics stream.

    Every row is flushed as soon as it is written, so each complete line parses on its
    own even after a crash.
    """

    def __init__(self, path: Path, record_wall_time: bool = True):
        self.path = path
        self.record_wall_time = record_wall_time
        self.rows = 0
        self._start = time.monotonic()
        path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(path, "w", encoding="utf-8")

    def write(self, row: MetricRow) -> None:
        if self.record_wall_time:
            row["wall_time"] = round(time.monotonic() - self._start, 6)
        self._file.write(json.dumps(row, sort_keys=True) + "\n")
        self._file.flush()
        self.rows += 1

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def read_metrics(path: PathLike) -> List[MetricRow]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


@dataclass
class RunRecord:
    """What a finished run leaves behind."""
    output_dir: Path
    config: Dict[str, Dict[str, Any]]
    metrics_path: Path
    checkpoint: Path
    final_eval: Optional[EvalReport] = None
    checksums: Dict[str, str] = field(default_factory=dict)

    def metrics(self) -> List[MetricRow]:
        return read_metrics(self.metrics_path)


def load_datasets(config: RunConfig) -> Tuple[Dataset, Dataset]:
    """
    Read the train and eval dataset files named in the config.

    Raises:
        FileNotFoundError: If a file is missing
        FormatError: If a file is malformed
        ConfigError: If the data does not match the configured dimensions
    """
    train = read_dataset(config.data.train_path)
    held_out = read_dataset(config.data.eval_path)
    for name, data in (("train", train), ("eval", held_out)):
        _check_dims(config, data, name)
    return train, held_out


def _check_dims(config: RunConfig, data: Dataset, name: str) -> None:
    if len(data) and data.image_size != config.data.image_size:
        raise ConfigError(
            f"{name} images are {data.image_size}px but data.image_size is {config.data.image_size}"
        )
    if data.latent_dim != config.data.latent_dim:
        raise ConfigError(
            f"{name} latent_dim {data.latent_dim} != data.latent_dim {config.data.latent_dim}"
        )


def _optimizer(params: Dict[str, dc.Parameter], kind: str, learning_rate: float) -> Optimizer:
    return Optimizer(list(params.values()), OptimizerState(kind=kind, learning_rate=learning_rate))


def _batch_indices(rng: np.random.Generator, size: int, batch_size: int) -> np.ndarray:
    return np.sort(rng.choice(size, size=min(batch_size, size), replace=False))


def _prepare(
    config: RunConfig, phase: str, train: Optional[Dataset], held_out: Optional[Dataset]
) -> Tuple[Dataset, Dataset, Path]:
    config.validate()
    if config.run.phase != phase:
        raise ContractError(f"run.phase is {config.run.phase!r}, this run needs {phase!r}")
    if train is None or held_out is None:
        train, held_out = load_datasets(config)
    else:
        _check_dims(config, train, "train")
        _check_dims(config, held_out, "eval")
    if len(train) < 2:
        raise ContractError(f"training needs at least 2 scenes, got {len(train)}")
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.ini")
    return train, held_out, out


def _abort(model: DSVAModel, out: Path, step: int, error: NumericError) -> TrainingError:
    last_good = save_checkpoint(model.state_dict(), out / "last_good.ckpt")
    logger.error("non-finite value at step %d (%s); saved %s", step, error, last_good)
    return TrainingError(f"training aborted at step {step}: {error}", last_good)


def run_phase1(
    config: RunConfig,
    train: Optional[Dataset] = None,
    held_out: Optional[Dataset] = None,
) -> RunRecord:
    """
    Text-understanding pre-training: real labels as pseudo points through the text path.

    Args:
        config: Run configuration
        train: Training scenes (default: read data.train_path)
        held_out: Evaluation scenes (default: read data.eval_path)

    Returns:
        RunRecord whose checkpoint holds the encoder and the text path

    Raises:
        TrainingError: On a non-finite loss; the last good parameters are saved
    """
    train, held_out, out = _prepare(config, "pretrain_text", train, held_out)
    model = DSVAModel(config)
    reprompt = config.train.reprompt_train
    params = model.phase1_parameters(reprompt)
    opt = _optimizer(params, config.optim.kind, config.optim.learning_rate)
    weights = loss_weights(config)
    rng = np.random.default_rng([config.run.seed, 1])
    ckpt_path = out / "phase1.ckpt"
    logger.info("phase 1: %d steps, %d parameters", config.train.phase1_steps, len(params))

    with MetricsWriter(out / "metrics.jsonl", config.run.record_wall_time) as writer:
        bar = tqdm(
            range(1, config.train.phase1_steps + 1),
            desc="pretrain-text",
            disable=not config.run.progress,
            leave=False,
        )
        for step in bar:
            batch = make_batch(train, _batch_indices(rng, len(train), config.train.batch_size))
            try:
                step_loss = pretrain_text_step(
                    batch, model.encoder, model.project_real_text, model.text_lift,
                    model.text_decoder, model.token_table, opt, weights, reprompt,
                )
            except NumericError as e:
                raise _abort(model, out, step, e) from e
            loss = step_loss.loss
            row = MetricRow(
                phase="pretrain_text", step=step, loss=loss, mask_reprompt=step_loss.mask_reprompt
            )
            if config.train.eval_interval and step % config.train.eval_interval == 0:
                row["eval_miou"] = _quick_eval(model, config, held_out, text_only=True)
                save_checkpoint(_phase1_state(model), ckpt_path)
            writer.write(row)
            bar.set_postfix(loss=f"{loss:.4f}")

    save_checkpoint(_phase1_state(model), ckpt_path)
    report = _final_eval(model, config, held_out, out, text_only=True)
    return RunRecord(
        output_dir=out,
        config=config.to_dict(),
        metrics_path=out / "metrics.jsonl",
        checkpoint=ckpt_path,
        final_eval=report,
        checksums={"text_module": parameter_checksum(model.text_module_parameters())},
    )


def _phase1_state(model: DSVAModel) -> Dict[str, np.ndarray]:
    names = model.phase1_parameters(reprompt=True)
    return {name: p.data.copy() for name, p in names.items()}


def _quick_eval(model: DSVAModel, config: RunConfig, held_out: Dataset, text_only: bool) -> float:
    if len(held_out) == 0:
        return float("nan")
    report = evaluate(
        model, held_out, config.eval.iterations, config.eval.hard_reprompt,
        text_only=text_only, batch_size=config.eval.batch_size,
    )
    return report["miou"]


def _final_eval(
    model: DSVAModel,
    config: RunConfig,
    held_out: Dataset,
    out: Path,
    text_only: bool,
    probe: Optional[Dataset] = None,
) -> Optional[EvalReport]:
    if len(held_out) == 0:
        logger.warning("no evaluation scenes; skipping final evaluation")
        return None
    report = evaluate(
        model, held_out, config.eval.iterations, config.eval.hard_reprompt,
        text_only=text_only, probe_dataset=probe, batch_size=config.eval.batch_size,
    )
    atomic_write_json(out / "eval.json", dict(report))
    return report


def _set_trainable(params: Dict[str, dc.Parameter], trainable: bool) -> None:
    for p in params.values():
        p.requires_grad = trainable
        p.grad = None


def run_phase2(
    config: RunConfig,
    phase1_checkpoint: Optional[PathLike],
    train: Optional[Dataset] = None,
    held_out: Optional[Dataset] = None,
) -> RunRecord:
    """
    Decoupling phase: frozen text path, decoupler, visual path, gate, discriminators
    and q under triple supervision with CLUB alternation.

    Args:
        config: Run configuration
        phase1_checkpoint: Phase-1 checkpoint; None only with train.skip_pretrain
        train: Training scenes (default: read data.train_path)
        held_out: Evaluation scenes (default: read data.eval_path)

    Returns:
        RunRecord with the full-model checkpoint

    Raises:
        ContractError: If the frozen text path changed during training
        TrainingError: On a non-finite value; the last good parameters are saved
    """
    if phase1_checkpoint is None and not config.train.skip_pretrain:
        raise ContractError("phase 2 needs a phase-1 checkpoint unless train.skip_pretrain is set")
    train, held_out, out = _prepare(config, "train_decouple", train, held_out)
    model = DSVAModel(config)
    pretrained = phase1_checkpoint is not None
    if pretrained:
        state = load_checkpoint(phase1_checkpoint)
        missing = sorted(set(model.text_module_parameters()) - set(state))
        if missing:
            raise ContractError(f"{phase1_checkpoint} lacks text-path parameters {missing[:3]}")
        model.load_state_dict(state, strict=False)
        _set_trainable(model.text_module_parameters(), False)
    frozen_before = parameter_checksum(model.text_module_parameters())

    reprompt = config.train.reprompt_train
    if config.train.freeze_image_encoder:
        model.encoder.freeze()
    model.q.freeze()
    main_params = model.main_parameters(
        reprompt, config.train.freeze_image_encoder, include_text_path=not pretrained
    )
    main_opt = _optimizer(main_params, config.optim.kind, config.optim.learning_rate)
    disc_opt = _optimizer(
        model.discriminator_parameters(), config.optim.kind, config.optim.disc_learning_rate
    )
    q_opt = _optimizer(model.q_parameters(), "adam", config.club.q_learning_rate)
    schedule = ClubSchedule(config.club.k, config.club.q_steps_per_update, config.club.lambda_club)
    weights = loss_weights(config)
    rng = np.random.default_rng([config.run.seed, 2])
    ckpt_path = out / "phase2.ckpt"
    logger.info(
        "phase 2: %d steps, pretrained text path: %s, %d main parameters",
        config.train.phase2_steps, pretrained, len(main_params),
    )

    with MetricsWriter(out / "metrics.jsonl", config.run.record_wall_time) as writer:
        bar = tqdm(
            range(config.train.phase2_steps),
            desc="train-decouple",
            disable=not config.run.progress,
            leave=False,
        )
        for step in bar:
            batch = make_batch(train, _batch_indices(rng, len(train), config.train.batch_size))
            try:
                q_nll = _fit_q(model, batch.x_fused, schedule, step, q_opt)
                with dc.Tape():
                    result = model.decouple_step(batch, weights, reprompt)
                    dc.backward(result.objective)
                main_opt.step()
                disc_opt.step()
            except NumericError as e:
                raise _abort(model, out, step, e) from e
            row = MetricRow(phase="train_decouple", step=step + 1, loss=result.objective.item())
            row.update(result.breakdown)
            row["adv_objective"] = result.adversarial.objective
            row["mean_dv_on_text"] = result.adversarial.mean_dv_on_text
            row["mean_dt_on_vision"] = result.adversarial.mean_dt_on_vision
            row["q_nll"] = q_nll
            if config.train.eval_interval and (step + 1) % config.train.eval_interval == 0:
                row["eval_miou"] = _quick_eval(model, config, held_out, text_only=False)
                save_checkpoint(model.state_dict(), ckpt_path)
            writer.write(row)
            bar.set_postfix(loss=f"{row['loss']:.4f}")

    frozen_after = parameter_checksum(model.text_module_parameters())
    if pretrained and frozen_after != frozen_before:
        raise ContractError("frozen text-path parameters changed during phase 2")
    save_checkpoint(model.state_dict(), ckpt_path)
    probe = train.subset(range(min(PROBE_SCENES, len(train))))
    report = _final_eval(model, config, held_out, out, text_only=False, probe=probe)
    return RunRecord(
        output_dir=out,
        config=config.to_dict(),
        metrics_path=out / "metrics.jsonl",
        checkpoint=ckpt_path,
        final_eval=report,
        checksums={"text_module_before": frozen_before, "text_module_after": frozen_after},
    )


def _fit_q(
    model: DSVAModel, x_fused: np.ndarray, schedule: ClubSchedule, step: int, opt: Optimizer
) -> Optional[float]:
    """Run the q fits of an update_q step on detached features; the main model stays fixed."""
    if alternate(schedule, step) is not Phase.UPDATE_Q or schedule.q_steps_per_update == 0:
        return None
    with dc.no_grad():
        state = model.decouple(x_fused)
    model.q.unfreeze()
    try:
        nll = None
        for _ in range(schedule.q_steps_per_update):
            nll = fit_q_step(model.q, state.h_text, state.h_vision, opt)
    finally:
        model.q.freeze()
    return nll


def load_model(config: RunConfig, checkpoint: PathLike) -> Tuple[DSVAModel, bool]:
    """
    Build a model and load a checkpoint into it.

    Returns:
        (model, text_only) where text_only is True for a checkpoint with no decoupling stage
    """
    state = load_checkpoint(checkpoint)
    model = DSVAModel(config)
    model.load_state_dict(state, strict=False)
    return model, not has_decoupling_stage(list(state))


def run_ablation(
    config: RunConfig,
    train: Optional[Dataset] = None,
    held_out: Optional[Dataset] = None,
    variants: Tuple[str, ...] = ABLATIONS,
) -> Dict[str, EvalReport]:
    """
    Compare the full method with degraded variants.

    full: phase 1 then phase 2. zero_aux: all auxiliary weights 0. no_pretrain: phase 2
    from scratch with the text path trained jointly. no_reprompt: no dense-reprompt pass
    in phase 2. Each variant writes into its own subdirectory.
    """
    unknown = set(variants) - set(ABLATIONS)
    if unknown:
        raise ConfigError(f"unknown ablation variants {sorted(unknown)}")
    config.validate()
    if train is None or held_out is None:
        train, held_out = load_datasets(config)
    root = config.output_dir

    phase1_ckpt: Optional[Path] = None
    if any(v != "no_pretrain" for v in variants):
        phase1_cfg = copy.deepcopy(config)
        phase1_cfg.run.output_dir = str(root / "phase1")
        phase1_cfg.run.phase = "pretrain_text"
        phase1_ckpt = run_phase1(phase1_cfg, train, held_out).checkpoint

    reports: Dict[str, EvalReport] = {}
    for variant in variants:
        cfg = copy.deepcopy(config)
        cfg.run.output_dir = str(root / variant)
        cfg.run.phase = "train_decouple"
        ckpt = phase1_ckpt
        if variant == "zero_aux":
            cfg.adversary.lambda_adv = cfg.club.lambda_club = cfg.loss.lambda_ortho = 0.0
        elif variant == "no_pretrain":
            cfg.train.skip_pretrain = True
            ckpt = None
        elif variant == "no_reprompt":
            cfg.train.reprompt_train = False
        record = run_phase2(cfg, ckpt, train, held_out)
        if record.final_eval is not None:
            reports[variant] = record.final_eval
        logger.info("ablation %s finished", variant)
    atomic_write_json(root / "ablation.json", {k: dict(v) for k, v in reports.items()})
    return reports
