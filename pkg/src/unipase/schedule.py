"""Learning-rate schedule: linear warm-up from zero over the first 10% of
steps, then half-cosine decay from the peak down to the floor."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass
class ScheduleConfig:
    peak_lr: float
    warmup_fraction: float = 0.10
    floor_lr: float = 1e-6
    optimizer: str = "adamw"

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in (0, 1)")
        if self.floor_lr < 0:
            raise ValueError("floor_lr must be nonnegative")


def lr_at(step: int, total_steps: int, sched: ScheduleConfig) -> float:
    """Learning rate at a step in [0, total_steps]."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = sched.warmup_fraction * total_steps
    if step <= warmup:
        return sched.peak_lr * step / warmup if warmup > 0 else sched.peak_lr
    progress = (step - warmup) / (total_steps - warmup)
    return sched.floor_lr + 0.5 * (sched.peak_lr - sched.floor_lr) * (
        1.0 + math.cos(math.pi * progress)
    )
