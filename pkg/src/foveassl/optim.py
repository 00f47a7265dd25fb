"""LARS with linear LR scaling, linear warmup and cosine decay."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

REFERENCE_BATCH = 256


def scaled_lr(base_lr: float, batch_size: int) -> float:
    if batch_size < 1:
        raise ValueError(f"batch size must be positive, got {batch_size}")
    return base_lr * batch_size / REFERENCE_BATCH


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Schedule:
    peak_lr: float
    total_steps: int
    warmup_steps: int

    @classmethod
    def create(cls, peak_lr: float, total_steps: int, warmup_fraction: float) -> "Schedule":
        if total_steps < 1:
            raise ValueError("total_steps must be at least 1")
        if not 0.0 <= warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        # keep at least one decay step so lr_at(total_steps) reaches zero
        warmup = min(round_half_up(warmup_fraction * total_steps), total_steps - 1)
        return cls(peak_lr, total_steps, warmup)


def lr_at(step: int, sched: Schedule) -> float:
    if not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    w = sched.warmup_steps
    if step < w:
        return sched.peak_lr * step / w
    progress = (step - w) / (sched.total_steps - w)
    return sched.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def dump_schedule(sched: Schedule, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr"])
        for s in range(sched.total_steps + 1):
            writer.writerow([s, repr(lr_at(s, sched))])


@dataclass
class LarsConfig:
    base_lr: float = 1.6
    batch_size: int = 512
    weight_decay: float = 1e-6
    warmup_fraction: float = 0.01
    total_steps: int = 1
    momentum: float = 0.9
    trust_coefficient: float = 1e-3
    eps: float = 1e-8
    use_trust_ratio: bool = True


def is_excluded(name: str, value: np.ndarray) -> bool:
    """Biases and other 1-D parameters skip weight decay and trust scaling."""
    return value.ndim <= 1 or name.endswith(".bias")


def trust_ratio(w: np.ndarray, g: np.ndarray, config: LarsConfig) -> float:
    if not config.use_trust_ratio:
        return 1.0
    wn = float(np.linalg.norm(w))
    gn = float(np.linalg.norm(g))
    if wn == 0.0 or gn == 0.0:
        return 1.0
    return config.trust_coefficient * wn / (gn + config.weight_decay * wn + config.eps)


def lars_step(params: dict, grads: dict, config: LarsConfig, lr: float,
              velocity: dict | None = None) -> tuple[dict, dict]:
    """One LARS update. Returns new parameters and the new momentum buffers.

    Inputs are not modified.
    """
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    velocity = velocity or {}
    new_params, new_vel = {}, {}
    for name, w in params.items():
        if name not in grads:
            new_params[name] = w
            continue
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape} for {name}")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(w))):
            raise FloatingPointError(f"non-finite value in {name}")
        if is_excluded(name, w):
            update = lr * g
        else:
            eta = trust_ratio(w, g, config)
            update = lr * eta * (g + config.weight_decay * w)
        v = config.momentum * velocity[name] + update if name in velocity else update
        new_vel[name] = v
        new_params[name] = w - v
    return new_params, new_vel


@dataclass
class Lars:
    """Stateful wrapper: owns the momentum buffers and the step counter."""
    config: LarsConfig
    schedule: Schedule = None
    step_count: int = 0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.schedule is None:
            self.schedule = Schedule.create(
                scaled_lr(self.config.base_lr, self.config.batch_size),
                self.config.total_steps, self.config.warmup_fraction)

    def step(self, params: dict, grads: dict) -> tuple[dict, float]:
        lr = lr_at(min(self.step_count, self.schedule.total_steps), self.schedule)
        new_params, self.velocity = lars_step(params, grads, self.config, lr, self.velocity)
        self.step_count += 1
        return new_params, lr
