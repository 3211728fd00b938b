"""Optimizers, learning-rate schedules and seeded batching."""

from typing import Iterator, Optional

import numpy as np
import torch
from torch.optim.lr_scheduler import LambdaLR

from kdslu.config import ScheduleConfig, StageConfig


def seed_everything(seed: int) -> None:
    """Seed torch for parameter initialization."""
    torch.manual_seed(seed)


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed derived from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def schedule_factor(schedule: ScheduleConfig, index: int) -> float:
    """Multiplier on the initial rate at a step (linear) or epoch (anneal)."""
    if schedule.kind == "linear":
        return max(0.0, 1.0 - index / schedule.total_steps)
    if schedule.kind == "anneal":
        return schedule.gamma ** (-index)
    return 1.0


def learning_rate(schedule: ScheduleConfig, index: int) -> float:
    """Learning rate at a step (linear) or epoch (anneal)."""
    return schedule.lr * schedule_factor(schedule, index)


def build_optimizer(
    parameters: list[torch.nn.Parameter], stage: StageConfig
) -> Optional[torch.optim.Optimizer]:
    """
    Build the stage optimizer over trainable parameters only.

    Returns None when nothing is trainable, so a step is a no-op.
    """
    trainable = [p for p in parameters if p.requires_grad]
    if not trainable:
        return None
    if stage.optimizer == "sgd":
        return torch.optim.SGD(trainable, lr=stage.schedule.lr)
    return torch.optim.Adam(trainable, lr=stage.schedule.lr)


def build_scheduler(optimizer: Optional[torch.optim.Optimizer], schedule: ScheduleConfig) -> Optional[LambdaLR]:
    """LambdaLR following schedule_factor; drive it with advance_scheduler."""
    if optimizer is None:
        return None
    return LambdaLR(optimizer, lambda index: schedule_factor(schedule, index))


def steps_per_epoch(num_items: int, batch_size: int) -> int:
    return max(1, -(-num_items // batch_size))


def schedule_advances(schedule: ScheduleConfig, step: int, epoch_steps: int) -> bool:
    """Whether the schedule index moves after `step`: every step (linear), at epoch ends otherwise."""
    if schedule.kind == "linear":
        return True
    return (step + 1) % epoch_steps == 0


def advance_scheduler(
    scheduler: Optional[LambdaLR], schedule: ScheduleConfig, step: int, epoch_steps: int
) -> None:
    """Step the scheduler after the optimizer update of `step`, at the schedule's cadence."""
    if scheduler is not None and schedule_advances(schedule, step, epoch_steps):
        scheduler.step()


def epoch_batches(num_items: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Index batches for one epoch in a seed-determined order."""
    order = np.random.default_rng((seed, epoch)).permutation(num_items)
    return [order[i : i + batch_size] for i in range(0, num_items, batch_size)]


def step_batches(num_items: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless stream of index batches, reshuffled every pass over the data."""
    epoch = 0
    while True:
        yield from epoch_batches(num_items, batch_size, seed, epoch)
        epoch += 1
