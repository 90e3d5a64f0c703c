"""Training orchestration: supernet pre-training and from-scratch retraining.

One recipe drives both phases. Supernet training runs the masked
parallel-subnets step and streams loss records; retraining builds the
physically narrowed net from a fresh initialization and trains it as the
single-part special case of the same loop, so both phases share optimizer,
schedule and batching behavior exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .archdesc import ArchDescription, narrow_description
from .datasets import DatasetBundle, DatasetSpec
from .errors import RecordError
from .evolution import evaluate, make_candidate
from .records import LossRecord, RecordWriter
from .space import WidthConfig
from .supernet import (
    SupernetHandle,
    build_supernet,
    save_checkpoint,
    supernet_train_step,
)


@dataclass(frozen=True)
class OptimizerSpec:
    """SGD settings plus a per-epoch learning-rate schedule."""

    kind: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = False
    schedule: str = "cosine"
    warmup_epochs: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise RecordError(f"unknown optimizer kind {self.kind!r}")
        if self.schedule not in ("cosine", "constant"):
            raise RecordError(f"unknown schedule {self.schedule!r}")
        if self.lr <= 0:
            raise RecordError("learning rate must be positive")
        if self.warmup_epochs < 0:
            raise RecordError("warmup_epochs must be non-negative")


@dataclass(frozen=True)
class TrainRecipe:
    """Everything one training phase needs, dataset included."""

    epochs: int = 30
    batch_size: int = 128
    n_parts: int = 4
    partition_policy: str = "largest-random"
    seed: int = 7
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    checkpoint_every: int = 1

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise RecordError("epochs must be at least 1")
        if self.batch_size < 1 or self.batch_size % self.n_parts != 0:
            raise RecordError(
                f"batch_size {self.batch_size} must be a positive multiple of "
                f"n_parts {self.n_parts}"
            )
        if self.checkpoint_every < 1:
            raise RecordError("checkpoint_every must be at least 1")


def desk_recipe(**overrides) -> TrainRecipe:
    """The CPU-scale default: 30 epochs, batches of 128 split into 4 parts."""
    return replace(TrainRecipe(), **overrides) if overrides else TrainRecipe()


def make_optimizer(parameters, spec: OptimizerSpec) -> torch.optim.Optimizer:
    if spec.kind == "adam":
        return torch.optim.Adam(parameters, lr=spec.lr, weight_decay=spec.weight_decay)
    return torch.optim.SGD(
        parameters,
        lr=spec.lr,
        momentum=spec.momentum,
        weight_decay=spec.weight_decay,
        nesterov=spec.nesterov,
    )


def lr_factor(spec: OptimizerSpec, epoch: int, total_epochs: int) -> float:
    """Schedule multiplier for ``epoch`` (0-based): linear warmup, then the
    chosen decay over the remaining epochs."""
    if epoch < spec.warmup_epochs:
        return (epoch + 1) / (spec.warmup_epochs + 1)
    if spec.schedule == "constant":
        return 1.0
    span = max(1, total_epochs - spec.warmup_epochs)
    progress = (epoch - spec.warmup_epochs) / span
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def _run_training(
    handle: SupernetHandle,
    recipe: TrainRecipe,
    data: DatasetBundle,
    writer: RecordWriter | None,
    out_dir: Path | None,
    partition_rng: np.random.Generator,
    data_rng: np.random.Generator,
) -> None:
    optimizer = make_optimizer(handle.model.parameters(), recipe.optimizer)
    for epoch in range(recipe.epochs):
        factor = lr_factor(recipe.optimizer, epoch, recipe.epochs)
        for group in optimizer.param_groups:
            group["lr"] = recipe.optimizer.lr * factor
        for inputs, labels in data.train.batches(
            recipe.batch_size, shuffle=True, rng=data_rng, drop_last=True
        ):
            _, step_records = supernet_train_step(
                handle,
                optimizer,
                inputs,
                labels,
                partition_rng,
                n_parts=recipe.n_parts,
                policy=recipe.partition_policy,
            )
            if writer is not None:
                writer.write(step_records)
        if out_dir is not None and (epoch + 1) % recipe.checkpoint_every == 0:
            save_checkpoint(
                out_dir / f"checkpoint-epoch{epoch + 1:03d}.pt",
                handle,
                optimizer,
                partition_rng,
            )
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.pt", handle, optimizer, partition_rng)


def train_supernet(
    desc: ArchDescription,
    recipe: TrainRecipe,
    data: DatasetBundle,
    out_dir: str | Path,
) -> tuple[SupernetHandle, Path]:
    """Constraint-free supernet pre-training.

    Writes per-epoch checkpoints plus a final one, and streams one loss record
    per part per iteration to ``records.jsonl``. Fully reproducible from
    ``recipe.seed``: initialization, batch order and partition draws all derive
    from it.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(recipe.seed)
    handle = build_supernet(desc)
    partition_rng = np.random.default_rng(recipe.seed)
    data_rng = np.random.default_rng(recipe.seed + 1)
    records_path = out_dir / "records.jsonl"
    with RecordWriter(records_path) as writer:
        _run_training(handle, recipe, data, writer, out_dir, partition_rng, data_rng)
    return handle, records_path


def retrain_subnet(
    desc: ArchDescription,
    config: WidthConfig,
    recipe: TrainRecipe,
    data: DatasetBundle,
    calib_batch_limit: int = 100,
) -> tuple[SupernetHandle, float]:
    """Train the physically narrowed subnet from scratch and report top-1.

    Never touches supernet weights: the net is rebuilt at the config's widths
    from a fresh seeded initialization, trained as a single-part run, then
    evaluated with recalibrated statistics on the validation split.
    """
    sub_desc = narrow_description(desc, config)
    torch.manual_seed(recipe.seed)
    handle = build_supernet(sub_desc)
    single_part = replace(recipe, n_parts=1, partition_policy="largest-random")
    partition_rng = np.random.default_rng(recipe.seed)
    data_rng = np.random.default_rng(recipe.seed + 1)
    _run_training(handle, single_part, data, None, None, partition_rng, data_rng)
    accuracy = subnet_top1(handle, sub_desc.space.largest_config(), data, recipe.batch_size,
                           calib_batch_limit)
    return handle, accuracy


def subnet_top1(
    handle: SupernetHandle,
    config: WidthConfig,
    data: DatasetBundle,
    batch_size: int,
    calib_batch_limit: int = 100,
) -> float:
    """Recalibrated validation accuracy of one subnet of ``handle``."""
    candidate = make_candidate(handle.space, config)
    scored = evaluate(
        candidate,
        handle,
        data.val.batch_list(batch_size),
        data.calib.batch_list(batch_size),
        calib_batch_limit,
    )
    assert scored.proxy_accuracy is not None
    return scored.proxy_accuracy


def uniform_width_config(space, target_flops: int) -> WidthConfig:
    """Every layer at (close to) one shared keep ratio, matching the target as
    nearly as the grids allow; the standard hand-crafted baseline."""
    best: tuple[int, int, WidthConfig] | None = None
    for numerator in range(1, 2001):
        scale = numerator / 2000.0
        widths = [0] * len(space)
        for members in space.coupling_classes:
            choices = space.allowed_choices(members[0])
            wanted = scale * space.layers[members[0]].max_out_channels
            width = min(choices, key=lambda choice: (abs(choice - wanted), choice))
            for member in members:
                widths[member] = width
        config = WidthConfig(tuple(widths))
        flops = space.flops(config)
        key = (abs(flops - target_flops), flops)
        if best is None or key < (best[0], best[1]):
            best = (key[0], key[1], config)
    assert best is not None
    return best[2]


def write_results_table(rows: Sequence[dict], path: str | Path) -> None:
    """Results table with the shared column set; missing values stay blank."""
    columns = ["config_id", "widths", "flops", "params", "proxy_acc", "retrained_acc"]
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({column: row.get(column, "") for column in columns})
