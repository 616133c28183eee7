"""AdamW with decoupled weight decay, global-norm clipping, LR schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import ContractViolation, Tensor


@dataclass
class AdamWState:
    """Per-parameter-set optimizer state, moments keyed by parameter order."""

    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def ensure_moments(self, params):
        if not self.first_moment:
            self.first_moment = [np.zeros_like(p.data) for p in params]
            self.second_moment = [np.zeros_like(p.data) for p in params]


def adamw_step(state: AdamWState, params, grads) -> AdamWState:
    """One AdamW update, in place on each param's data.

    Weight decay is decoupled: param <- param - lr*wd*param, applied
    independently of the moment-based step. grads is a list aligned with
    params, or a dict keyed by param.
    """
    if isinstance(grads, dict):
        grads = [grads[p] for p in params]
    if len(grads) != len(params):
        raise ContractViolation("grads and params differ in length")
    state.ensure_moments(params)
    state.step_count += 1
    t = state.step_count
    lr = state.learning_rate
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g.shape != p.data.shape:
            raise ContractViolation(
                f"grad shape {g.shape} does not match param shape {p.data.shape}"
            )
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        m = state.first_moment[i]
        v = state.second_moment[i]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


class AdamW:
    """Object wrapper binding an AdamWState to a fixed parameter list."""

    def __init__(self, params, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamWState(
            learning_rate=lr,
            weight_decay=weight_decay,
            beta1=betas[0],
            beta2=betas[1],
            eps=eps,
        )

    @property
    def lr(self):
        return self.state.learning_rate

    @lr.setter
    def lr(self, value):
        self.state.learning_rate = value

    def step(self, grads):
        adamw_step(self.state, self.params, grads)


def clip_global_norm(grads, max_norm: float):
    """Scale all grads by max_norm/g when the global L2 norm g exceeds it."""
    if max_norm <= 0:
        raise ContractViolation("max_norm must be positive")
    arrays = [g.data if isinstance(g, Tensor) else np.asarray(g) for g in grads]
    total = math.sqrt(sum(float((a * a).sum()) for a in arrays))
    if total <= max_norm or total == 0.0:
        return list(arrays)
    scale = max_norm / total
    return [a * scale for a in arrays]


@dataclass
class LrSchedule:
    """Plateau or cosine learning-rate schedule.

    plateau: multiply by `factor` after `patience` epochs without validation
    improvement. cosine: lr(e) = min_lr + (base-min_lr)*(1+cos(pi*e/total))/2,
    anchored at the first current_lr seen unless base_lr is set.
    """

    kind: str
    factor: float = 0.5
    patience: int = 10
    min_lr: float = 1e-6
    total_epochs: int = 300
    base_lr: float | None = None
    _best: float = math.inf
    _bad_epochs: int = 0

    def __post_init__(self):
        if self.kind not in ("plateau", "cosine"):
            raise ContractViolation(f"unknown schedule kind {self.kind!r}")
        if not 0.0 < self.factor < 1.0:
            raise ContractViolation("plateau factor must be in (0, 1)")
        if self.patience < 1:
            raise ContractViolation("patience must be >= 1")
        if self.min_lr < 0.0:
            raise ContractViolation("min_lr must be >= 0")


def lr_schedule_step(sched: LrSchedule, epoch: int, val_loss: float, current_lr: float) -> float:
    """Advance the schedule one epoch and return the learning rate to use."""
    if epoch < 0:
        raise ContractViolation("epoch must be >= 0")
    if sched.kind == "cosine":
        if sched.base_lr is None:
            sched.base_lr = current_lr
        frac = min(epoch, sched.total_epochs) / sched.total_epochs
        return sched.min_lr + (sched.base_lr - sched.min_lr) * 0.5 * (
            1.0 + math.cos(math.pi * frac)
        )
    # plateau
    if val_loss < sched._best:
        sched._best = val_loss
        sched._bad_epochs = 0
        return current_lr
    sched._bad_epochs += 1
    if sched._bad_epochs >= sched.patience:
        sched._bad_epochs = 0
        return max(current_lr * sched.factor, sched.min_lr)
    return current_lr
