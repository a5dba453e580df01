"""Learning-rate schedules: linear warmup, then cosine or step (milestone) decay."""
from __future__ import annotations

import math
from dataclasses import dataclass

from ..errors import ConfigError


@dataclass(frozen=True)
class OptimSchedule:
    base_lr: float
    total_epochs: int
    warmup_epochs: int = 0
    warmup_start_lr: float = 0.0
    decay: str = "cosine"
    milestones: tuple = ()
    gamma: float = 0.1
    min_lr: float = 0.0

    def __post_init__(self):
        if self.decay not in ("cosine", "milestones", "constant"):
            raise ConfigError(f"unknown decay {self.decay!r}")
        if self.warmup_epochs > 0 and self.warmup_start_lr > self.base_lr:
            raise ConfigError("warmup_start_lr must not exceed base_lr")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError("milestones must be strictly increasing")
        if self.warmup_epochs < 0 or self.total_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")


def lr_at(schedule: OptimSchedule, epoch: int, step_fraction: float = 0.0) -> float:
    """Learning rate at ``epoch + step_fraction`` (fraction in ``[0, 1)``)."""
    if epoch < 0 or epoch > schedule.total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    t = epoch + step_fraction
    w = schedule.warmup_epochs
    if t < w:
        return schedule.warmup_start_lr + (schedule.base_lr - schedule.warmup_start_lr) * t / w
    if schedule.decay == "constant":
        return schedule.base_lr
    if schedule.decay == "milestones":
        passed = sum(epoch >= m for m in schedule.milestones)
        return schedule.base_lr * schedule.gamma ** passed
    span = max(schedule.total_epochs - w, 1e-12)
    progress = min((t - w) / span, 1.0)
    return schedule.min_lr + (schedule.base_lr - schedule.min_lr) * 0.5 * (1 + math.cos(math.pi * progress))


def set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
