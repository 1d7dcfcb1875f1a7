"""Autoregressive training with repeated iterations on early segment steps.

Every segment of every bearing in a group advances in lockstep, one window
per step. The first ``bg`` steps of a segment are split into ``z`` parts
and each part is trained ``iters`` times with the HI window ``x2`` frozen;
``x2`` is shifted once per step after the last iteration.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .armodel import ARModel, ModelConfig, init_x2, save_model, shift_update
from .datapipe import Batch, WindowedBearing, assemble_batch
from .errors import ConfigError, ContractViolation
from .numcore import AdamW, mse_loss

log = logging.getLogger(__name__)

DEFAULT_SCHEDULE = [[2, 2, 2], [2, 2, 1], [2, 1, 1]]
ABLATIONS = ("none", "non-ar")


def normalize_schedule(schedule: Sequence, z: int) -> list[tuple[int, ...]]:
    """Accept nested per-epoch lists or the flat form ``[2,2,2, 2,2,1, 2,1,1]``."""
    if not schedule:
        raise ConfigError("iters_schedule must not be empty")
    if all(isinstance(v, (int, np.integer)) for v in schedule):
        flat = [int(v) for v in schedule]
        if len(flat) % z:
            raise ConfigError(f"iters_schedule has {len(flat)} entries, not a multiple of z={z}")
        rows = [tuple(flat[i: i + z]) for i in range(0, len(flat), z)]
    else:
        rows = [tuple(int(v) for v in row) for row in schedule]
    for row in rows:
        if len(row) != z:
            raise ConfigError(f"iters_schedule entry {list(row)} must have z={z} values")
        if min(row) < 1:
            raise ConfigError("every iters_schedule count must be >= 1")
    return rows


@dataclass
class TrainConfig:
    k: int = 45
    n: int = 15
    epochs: int = 6
    lr: float = 0.0008
    weight_decay: float = 0.01
    seed: int = 15
    bg: int = 120
    z: int = 3
    iters_schedule: list = field(default_factory=lambda: [list(r) for r in DEFAULT_SCHEDULE])
    bearings_per_batch: int = 3
    init_mode: str = "teacher"
    ablation: str = "none"
    points: int = 2560
    channel_scale: float = 1.0
    label_branch_channels: int = 8
    fusion_hidden: int = 256
    dropout_rate: float = 0.2

    def __post_init__(self) -> None:
        self.validate()

    def validate(self, m: int | None = None) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.z < 1:
            raise ConfigError(f"z must be >= 1, got {self.z}")
        if self.bg < 0 or self.bg % self.z:
            raise ConfigError(f"bg ({self.bg}) must be a non-negative multiple of z ({self.z})")
        if m is not None and self.bg > m:
            raise ConfigError(f"bg ({self.bg}) exceeds the segment length m ({m})")
        if self.bearings_per_batch < 1:
            raise ConfigError("bearings_per_batch must be >= 1")
        if self.init_mode not in ("teacher", "ones"):
            raise ConfigError(f"init_mode for training must be 'teacher' or 'ones', got {self.init_mode!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        self.schedule  # raises on malformed schedules

    @property
    def schedule(self) -> list[tuple[int, ...]]:
        return normalize_schedule(self.iters_schedule, self.z)

    def model_config(self) -> ModelConfig:
        return ModelConfig(k=self.k, points=self.points, channel_scale=self.channel_scale,
                           label_branch_channels=self.label_branch_channels,
                           fusion_hidden=self.fusion_hidden, dropout_rate=self.dropout_rate)

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def find_train_iters(step: int, epoch: int, config: TrainConfig) -> int:
    if step >= config.bg:
        return 1
    part = step // (config.bg // config.z)
    sched = config.schedule
    return sched[min(epoch, len(sched) - 1)][part]


def expected_backward_passes(m: int, epoch: int, config: TrainConfig) -> int:
    """Closed form: sum of per-part iteration counts over the first bg steps plus m - bg."""
    row = config.schedule[min(epoch, len(config.schedule) - 1)]
    return sum(row) * (config.bg // config.z) + (m - config.bg)


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    backward_passes: list[list[int]] = field(default_factory=list)  # [epoch][group]
    shifts: list[list[int]] = field(default_factory=list)           # [epoch][group]
    wall_time_s: float = 0.0
    checkpoint: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def train_segment_step(model: ARModel, batch: Batch, x2: np.ndarray, iters: int,
                       optimizer: AdamW, rng: np.random.Generator, shift: bool = True):
    """Train ``iters`` times on one lockstep batch with ``x2`` held fixed.

    Returns ``(new_x2, losses)``. Padding rows are excluded from the loss.
    """
    if iters < 1:
        raise ContractViolation(f"iters must be >= 1, got {iters}")
    mask = ~batch.is_padding
    losses = []
    y_pred = None
    for _ in range(iters):
        y_pred = model.forward(batch.x, x2, training=True, rng=rng)
        loss, grad = mse_loss(y_pred, batch.y, mask)
        grads = model.backward(grad)
        optimizer.step(model.parameters(), grads)
        losses.append(loss)
    new_x2 = shift_update(x2, y_pred) if shift else x2
    return new_x2, losses


def _initial_x2(config: TrainConfig, batch: Batch) -> np.ndarray:
    B = batch.x.shape[0]
    if config.ablation == "non-ar":
        return np.ones((B, config.k))
    return init_x2(config.init_mode, config.k, B, label_windows=batch.label_windows)


def train(datasets: Sequence[WindowedBearing], config: TrainConfig,
          checkpoint_dir: str | Path | None = None,
          model: ARModel | None = None) -> tuple[ARModel, TrainReport]:
    """Train on ``datasets`` (already padded to a shared geometry)."""
    if not datasets:
        raise ConfigError("training needs at least one bearing")
    d0 = datasets[0]
    for d in datasets:
        if not d.has_labels:
            raise ConfigError(f"bearing {d.id} has no labels")
        if (d.k, d.n, d.m) != (config.k, config.n, d0.m):
            raise ConfigError(f"bearing {d.id} geometry (k={d.k}, n={d.n}, m={d.m}) does not match config")
        if d.points != config.points:
            raise ConfigError(f"bearing {d.id} has S={d.points}, config points={config.points}")
    m = d0.m
    config.validate(m)

    model = model if model is not None else ARModel(config.model_config(), np.random.default_rng([config.seed, 0]))
    optimizer = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    drop_rng = np.random.default_rng([config.seed, 1])
    order_rng = np.random.default_rng([config.seed, 2])
    report = TrainReport()
    t0 = time.perf_counter()
    shift = config.ablation != "non-ar"

    for epoch in range(config.epochs):
        order = order_rng.permutation(len(datasets))
        groups = [order[i: i + config.bearings_per_batch]
                  for i in range(0, len(order), config.bearings_per_batch)]
        epoch_losses: list[float] = []
        passes, shifts = [], []
        for group in groups:
            members = [datasets[i] for i in group]
            x2 = None
            n_back = n_shift = 0
            for step in range(m):
                batch = assemble_batch(members, step)
                if x2 is None:
                    x2 = _initial_x2(config, batch)
                iters = find_train_iters(step, epoch, config)
                x2, losses = train_segment_step(model, batch, x2, iters, optimizer, drop_rng, shift=shift)
                n_back += iters
                n_shift += int(shift)
                if not batch.is_padding.all():
                    epoch_losses.extend(losses)
            passes.append(n_back)
            shifts.append(n_shift)
        report.epoch_loss.append(float(np.mean(epoch_losses)) if epoch_losses else 0.0)
        report.backward_passes.append(passes)
        report.shifts.append(shifts)
        log.info("epoch %d/%d loss %.6f", epoch + 1, config.epochs, report.epoch_loss[-1])
        if checkpoint_dir is not None:
            save_model(model, checkpoint_dir, f"epoch_{epoch + 1}.arrul")

    if checkpoint_dir is not None:
        report.checkpoint = str(save_model(model, checkpoint_dir))
    report.wall_time_s = time.perf_counter() - t0
    return model, report
