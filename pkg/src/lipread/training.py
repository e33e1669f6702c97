"""Shared optimization loop: tri-stage LR, Adam, divergence guard, metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, TrainingDivergedError


@dataclass
class TrainSettings:
    steps: int
    batch_size: int = 4
    peak_lr: float = 1e-3
    warmup: float = 0.25
    hold: float = 0.0
    decay: float = 0.75
    decay_floor: float = 0.05
    freeze_steps: int = 0
    seed: int = 0
    log_every: int = 50
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8

    def __post_init__(self):
        if abs(self.warmup + self.hold + self.decay - 1.0) > 1e-9:
            raise ConfigError(
                f"schedule proportions sum to {self.warmup + self.hold + self.decay}, expected 1"
            )
        for name in ("steps", "batch_size", "freeze_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


def tri_stage_lr(step, total_steps, warmup, hold, decay, peak_lr, decay_floor=0.05):
    """Piecewise LR: linear warmup to peak, constant hold, linear decay.

    The last warmup step reaches the peak exactly and the final step lands
    on peak * decay_floor exactly.
    """
    if total_steps <= 0:
        return peak_lr
    w = round(warmup * total_steps)
    h = round(hold * total_steps)
    d = total_steps - w - h
    if step < w:
        return peak_lr * (step + 1) / w
    if step < w + h or d <= 0:
        return peak_lr
    i = step - w - h
    return peak_lr * (1.0 - (1.0 - decay_floor) * (i + 1) / d)


class MetricsWriter:
    """Collects comma-separated metric rows and writes them atomically."""

    def __init__(self, columns):
        self.columns = list(columns)
        self.rows = []

    def add(self, *values):
        if len(values) != len(self.columns):
            raise ConfigError(f"expected {len(self.columns)} metric values, got {len(values)}")
        self.rows.append([_fmt(v) for v in values])

    def text(self):
        lines = [",".join(self.columns)]
        lines += [",".join(r) for r in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, path):
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.text())


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_training(params, settings: TrainSettings, step_fn, metrics: MetricsWriter, active_names=None,
                 lr_scales=None):
    """Drive ``settings.steps`` Adam updates.

    ``step_fn(step, rng) -> (loss_tensor, extras tuple)`` builds the graph
    for one batch; this loop backpropagates, checks finiteness, applies the
    scheduled Adam update and logs ``(step, loss, *extras)`` rows.
    ``active_names(step) -> set | None`` restricts which parameters move
    (freezing); None means all.
    """
    state = ad.AdamState()
    rng = np.random.default_rng([settings.seed & 0xFFFFFFFF, 0x7261])
    last = None
    for step in range(settings.steps):
        loss, extras = step_fn(step, rng)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDivergedError(step)
        ad.backward(loss)
        lr = tri_stage_lr(
            step, settings.steps, settings.warmup, settings.hold, settings.decay,
            settings.peak_lr, settings.decay_floor,
        )
        active = active_names(step) if active_names is not None else None
        ad.adam_step(
            params, state, lr,
            beta1=settings.adam_beta1, beta2=settings.adam_beta2, eps=settings.adam_eps,
            active=active, lr_scales=lr_scales,
        )
        ad.zero_grads(params)
        last = (value, extras)
        if step % settings.log_every == 0 or step == settings.steps - 1:
            metrics.add(step, value, *extras)
    return last


def sample_batch(rng, n_items, batch_size):
    return rng.integers(0, n_items, size=min(batch_size, n_items))
