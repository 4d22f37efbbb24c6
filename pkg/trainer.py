#!/usr/bin/env python3
"""
Deterministic training and evaluation harness.

Identical (spec, config, data) produce byte-identical metrics CSVs and
checkpoints. Wall-clock time is logged, and written to the metrics only
when ``record_wall_time`` is on.
"""

import csv
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from checkpoint import load_checkpoint, save_checkpoint, write_atomic
from data_pipeline import Dataset, batches, compute_channel_stats, eval_plan, load_cifar, normalize, train_plan
from errors import (
    ConfigError,
    NonFiniteError,
    RunCancelledError,
    ScheduleError,
    SpecValidationError,
    TrainingDivergedError,
)
from model_builder import SparseNet, build_network
from optim import SGDNesterov
from tensor_core import softmax_cross_entropy
from topology import NetworkSpec

logger = logging.getLogger(__name__)

DEFAULT_EPOCHS = 280
DEFAULT_MILESTONES: Tuple[Tuple[int, float], ...] = ((150, 0.01), (200, 0.001), (250, 0.0002))
METRICS_HEADER = ("epoch", "lr", "train_loss", "train_error", "test_loss", "test_error", "wall_seconds")
SUMMARY_HEADER = ("checkpoint", "epoch", "test_loss", "test_error")
EVAL_BATCH = 256


def parse_milestones(text: str) -> Tuple[Tuple[int, float], ...]:
    """``"150:0.01, 200:0.001"`` -> ((150, 0.01), (200, 0.001))."""
    pairs = []
    for item in text.replace(";", ",").split(","):
        item = item.strip()
        if not item:
            continue
        epoch, sep, rate = item.partition(":")
        if not sep:
            raise ValueError(f"milestone {item!r} is not epoch:lr")
        pairs.append((int(epoch), float(rate)))
    return tuple(pairs)


def scale_milestones(milestones: Tuple[Tuple[int, float], ...], from_epochs: int,
                     to_epochs: int) -> Tuple[Tuple[int, float], ...]:
    """
    Move milestones proportionally to a new run length.

    Scaled epochs are floored and kept >= 1; milestones landing on the same
    epoch collapse to the later rate.
    """
    if from_epochs <= 0 or to_epochs <= 0:
        return ()
    scaled: Dict[int, float] = {}
    for epoch, rate in milestones:
        scaled[max(1, (epoch * to_epochs) // from_epochs)] = rate
    return tuple(sorted(scaled.items()))


class TrainConfig(BaseModel):
    """Optimizer, schedule and run settings. Defaults are the CIFAR schedule."""

    model_config = ConfigDict(frozen=True)

    epochs: int = Field(DEFAULT_EPOCHS, ge=0)
    base_lr: float = Field(0.1, gt=0)
    milestones: Tuple[Tuple[int, float], ...] = DEFAULT_MILESTONES
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)
    batch_size: int = Field(64, ge=1)
    seed: int = Field(0, ge=0)
    eval_every: int = Field(1, ge=1)
    dataset: str = "cifar10"
    limit: Optional[int] = Field(None, ge=1)
    out_dir: str = "runs/default"
    record_wall_time: bool = False
    scale_milestones: bool = True
    workers: int = Field(0, ge=0)

    @field_validator("milestones", mode="before")
    @classmethod
    def _parse(cls, value):
        if isinstance(value, str):
            return parse_milestones(value)
        return value

    @field_validator("dataset")
    @classmethod
    def _known_dataset(cls, value: str) -> str:
        if value not in ("cifar10", "cifar100"):
            raise ValueError(f"dataset must be cifar10 or cifar100, got {value!r}")
        return value

    @model_validator(mode="after")
    def _check_schedule(self):
        previous = 0
        for epoch, rate in self.milestones:
            if epoch <= previous:
                raise ValueError(f"milestones must be strictly increasing epochs >= 1, got {epoch}")
            if rate <= 0:
                raise ValueError(f"milestone rate must be > 0, got {rate} at epoch {epoch}")
            previous = epoch
        return self

    def with_epochs(self, epochs: int) -> "TrainConfig":
        """Override the run length, scaling milestones when enabled."""
        milestones = self.milestones
        if self.scale_milestones and epochs != self.epochs:
            milestones = scale_milestones(self.milestones, self.epochs, epochs)
        return self.model_copy(update={"epochs": epochs, "milestones": milestones})


def train_config_from_section(values: Dict[str, str], **overrides) -> TrainConfig:
    """
    Build a TrainConfig from a [train] section.

    When ``epochs`` is given without ``milestones`` the default milestones are
    scaled to the new length (unless ``scale_milestones = false``).
    """
    fields: Dict[str, object] = dict(values)
    fields.update({k: v for k, v in overrides.items() if v is not None})
    epochs = fields.pop("epochs", None)
    try:
        config = TrainConfig.model_validate(fields)
        if epochs is not None:
            explicit = "milestones" in fields
            config = (config.model_copy(update={"epochs": int(epochs)}) if explicit
                      else config.with_epochs(int(epochs)))
            config = TrainConfig.model_validate(config.model_dump())
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"train: {e}") from e
    return config


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step schedule: base_lr, then the rate of the last milestone reached."""
    if not 0 <= epoch < config.epochs:
        raise ScheduleError(f"epoch {epoch} outside [0, {config.epochs})")
    rate = config.base_lr
    for milestone, milestone_rate in config.milestones:
        if epoch >= milestone:
            rate = milestone_rate
    return rate


@dataclass
class MetricsRow:
    epoch: int
    lr: float
    train_loss: Optional[float] = None
    train_error: Optional[float] = None
    test_loss: Optional[float] = None
    test_error: Optional[float] = None
    wall_seconds: float = 0.0

    def cells(self) -> List[str]:
        def fmt(value: Optional[float]) -> str:
            return "" if value is None else f"{value:.6f}"

        return [
            str(self.epoch), f"{self.lr:.6g}", fmt(self.train_loss), fmt(self.train_error),
            fmt(self.test_loss), fmt(self.test_error), f"{self.wall_seconds:.3f}",
        ]


class MetricsWriter:
    """Append-only metrics CSV, flushed after every row."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._file, lineterminator="\n")
        self._writer.writerow(METRICS_HEADER)
        self._file.flush()

    def write(self, row: MetricsRow) -> None:
        self._writer.writerow(row.cells())
        self._file.flush()

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def evaluate(model: SparseNet, dataset: Dataset, batch_size: int = EVAL_BATCH,
             workers: int = 0) -> MetricsRow:
    """
    Eval-mode pass over ``dataset``: mean loss and top-1 error.

    Running statistics and parameters are left untouched.
    """
    total_loss = 0.0
    correct = 0
    for batch in batches(dataset, eval_plan(batch_size, workers)):
        logits = model.forward(batch.images, training=False)
        loss = softmax_cross_entropy(logits, batch.labels)
        total_loss += float(loss.data) * len(batch)
        correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
    n = max(len(dataset), 1)
    return MetricsRow(epoch=-1, lr=0.0, test_loss=total_loss / n, test_error=1.0 - correct / n)


def evaluate_checkpoint(path: Union[str, Path], spec: NetworkSpec, dataset: Dataset,
                        batch_size: int = EVAL_BATCH) -> MetricsRow:
    model, checkpoint = load_checkpoint(path, spec)
    row = evaluate(model, dataset, batch_size)
    row.epoch = checkpoint.epoch
    return row


def load_datasets(data_dir: Union[str, Path], config: TrainConfig) -> Tuple[Dataset, Dataset]:
    """Both splits of ``config.dataset``, each truncated to ``config.limit``."""
    train_split = load_cifar(data_dir, config.dataset, "train").subset(config.limit)
    test_split = load_cifar(data_dir, config.dataset, "test").subset(config.limit)
    return train_split, test_split


@dataclass
class TrainResult:
    out_dir: Path
    metrics_path: Path
    final_checkpoint: Path
    best_checkpoint: Optional[Path]
    rows: List[MetricsRow] = field(default_factory=list)
    final_eval: Optional[MetricsRow] = None
    best_eval: Optional[MetricsRow] = None


ProgressCallback = Callable[[int, int, MetricsRow], None]


def _write_run_config(out: Path, spec: NetworkSpec, config: TrainConfig,
                      mean: np.ndarray, std: np.ndarray, train_n: int, test_n: int) -> None:
    payload = {
        "model": spec.model_dump(mode="json"),
        "train": config.model_dump(mode="json"),
        "normalization": {"mean": [float(m) for m in mean], "std": [float(s) for s in std]},
        "train_samples": train_n,
        "test_samples": test_n,
    }
    write_atomic(out / "run_config.json", (json.dumps(payload, indent=2) + "\n").encode("utf-8"))


def read_normalization(run_dir: Union[str, Path]) -> Optional[Tuple[List[float], List[float]]]:
    path = Path(run_dir) / "run_config.json"
    if not path.is_file():
        return None
    try:
        record = json.loads(path.read_text(encoding="utf-8"))["normalization"]
        mean = [float(m) for m in record["mean"]]
        std = [float(s) for s in record["std"]]
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{path}: no usable normalization record ({e!r})") from e
    return mean, std


def _write_summary(out: Path, rows: List[Tuple[str, MetricsRow]]) -> None:
    lines = [",".join(SUMMARY_HEADER)]
    for label, row in rows:
        lines.append(f"{label},{row.epoch},{row.test_loss:.6f},{row.test_error:.6f}")
    write_atomic(out / "summary.csv", ("\n".join(lines) + "\n").encode("utf-8"))


def train(
    spec: NetworkSpec,
    config: TrainConfig,
    train_data: Dataset,
    test_data: Optional[Dataset] = None,
    out_dir: Optional[Union[str, Path]] = None,
    cancel_event: Optional[threading.Event] = None,
    progress_callback: Optional[ProgressCallback] = None,
) -> TrainResult:
    """
    Train ``spec`` with Nesterov SGD on the step schedule of ``config``.

    Inputs are normalized with the per-channel statistics of ``train_data``.
    Writes to the output directory:
        metrics.csv            one row per epoch
        epoch_<n>.spnf         after epoch n for every milestone n
        best.spnf              whenever the test error improves
        final.spnf             at the end (also for zero epochs)
        summary.csv            eval_final / eval_best rows when test data is given
        run_config.json        resolved model and training settings

    Raises:
        TrainingDivergedError: the loss became NaN/Inf (carries the step index)
        RunCancelledError: ``cancel_event`` was set
    """
    if train_data.class_count != spec.num_classes:
        raise SpecValidationError([
            f"num_classes: model has {spec.num_classes}, {train_data.name} has {train_data.class_count}"
        ])
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    mean, std = compute_channel_stats(train_data)
    train_set = normalize(train_data, mean, std)
    test_set = normalize(test_data, mean, std) if test_data is not None else None
    _write_run_config(out, spec, config, mean, std, len(train_set), len(test_set) if test_set else 0)

    model = build_network(spec, np.random.default_rng(config.seed))
    optimizer = SGDNesterov(model.parameters(), config.momentum, config.weight_decay)
    milestone_epochs = {epoch for epoch, _ in config.milestones}
    plan = train_plan(config.batch_size, config.seed, config.workers)
    result = TrainResult(out, out / "metrics.csv", out / "final.spnf", None)
    best_error = math.inf
    step = 0
    logger.info(
        f"Training {spec.display_name} for {config.epochs} epochs on {len(train_set):,} images "
        f"(batch {config.batch_size}, seed {config.seed}) -> {out}"
    )

    with MetricsWriter(result.metrics_path) as metrics:
        for epoch in range(config.epochs):
            lr = lr_at(epoch, config)
            started = time.perf_counter()
            total_loss = 0.0
            correct = 0
            for batch in batches(train_set, plan.for_epoch(epoch)):
                if cancel_event is not None and cancel_event.is_set():
                    raise RunCancelledError(f"run cancelled at epoch {epoch}, step {step}")
                optimizer.zero_grad()
                try:
                    logits = model.forward(batch.images, training=True)
                    loss = softmax_cross_entropy(logits, batch.labels)
                except NonFiniteError as e:
                    raise TrainingDivergedError(step, float("nan")) from e
                loss_value = float(loss.data)
                if not math.isfinite(loss_value):
                    raise TrainingDivergedError(step, loss_value)
                try:
                    loss.backward()
                except NonFiniteError as e:
                    raise TrainingDivergedError(step, loss_value) from e
                optimizer.step(lr)
                total_loss += loss_value * len(batch)
                correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
                logger.debug(f"epoch {epoch} step {step}: loss {loss_value:.4f}")
                step += 1

            row = MetricsRow(
                epoch=epoch, lr=lr,
                train_loss=total_loss / len(train_set),
                train_error=1.0 - correct / len(train_set),
            )
            last = epoch == config.epochs - 1
            if test_set is not None and ((epoch + 1) % config.eval_every == 0 or last):
                evaluated = evaluate(model, test_set, workers=config.workers)
                row.test_loss, row.test_error = evaluated.test_loss, evaluated.test_error
                if row.test_error < best_error:
                    best_error = row.test_error
                    result.best_checkpoint = out / "best.spnf"
                    save_checkpoint(model, result.best_checkpoint, epoch + 1, optimizer.velocity)
            elapsed = time.perf_counter() - started
            if config.record_wall_time:
                row.wall_seconds = elapsed
            metrics.write(row)
            result.rows.append(row)
            logger.info(
                f"epoch {epoch + 1}/{config.epochs} lr {lr:g}: train loss {row.train_loss:.4f} "
                f"error {row.train_error:.4f}"
                + (f", test error {row.test_error:.4f}" if row.test_error is not None else "")
                + f" ({elapsed:.1f}s)"
            )
            if epoch + 1 in milestone_epochs:
                save_checkpoint(model, out / f"epoch_{epoch + 1}.spnf", epoch + 1, optimizer.velocity)
            if progress_callback is not None:
                progress_callback(epoch + 1, config.epochs, row)

    save_checkpoint(model, result.final_checkpoint, config.epochs, optimizer.velocity)
    if test_set is not None:
        result.final_eval = evaluate(model, test_set, workers=config.workers)
        result.final_eval.epoch = config.epochs
        summary = [("eval_final", result.final_eval)]
        if result.best_checkpoint is not None:
            result.best_eval = evaluate_checkpoint(result.best_checkpoint, spec, test_set)
            summary.append(("eval_best", result.best_eval))
        _write_summary(out, summary)
    return result
