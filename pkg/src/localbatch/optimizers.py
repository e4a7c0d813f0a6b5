"""Inner optimizers run by each worker between synchronizations, and LR schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigError, InputError, NumericalError

__all__ = [
    "OptimizerConfig",
    "OptimizerState",
    "apply_step",
    "LrSchedule",
    "lr_at",
    "linear_scaled_lr",
    "ScheduleConfig",
    "auto_lr",
]

OPTIMIZER_KINDS = ("sgd", "shb", "adamw")


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float | None = None  # None -> 0.1 for adamw, 0 otherwise
    clip: float = 0.0  # global-norm clip; 0 disables

    @property
    def effective_weight_decay(self) -> float:
        if self.weight_decay is not None:
            return self.weight_decay
        return 0.1 if self.kind == "adamw" else 0.0

    def validate(self) -> list:
        errors = []
        if self.kind not in OPTIMIZER_KINDS:
            errors.append(("optimizer.kind", None, f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZER_KINDS}"))
        if not 0 <= self.momentum < 1:
            errors.append(("optimizer.momentum", None, "momentum must lie in [0, 1)"))
        for key in ("beta1", "beta2"):
            if not 0 <= getattr(self, key) < 1:
                errors.append((f"optimizer.{key}", None, f"{key} must lie in [0, 1)"))
        if self.eps <= 0:
            errors.append(("optimizer.eps", None, "eps must be positive"))
        if self.effective_weight_decay < 0:
            errors.append(("optimizer.weight_decay", None, "weight decay must be non-negative"))
        if self.clip < 0:
            errors.append(("optimizer.clip", None, "clip must be non-negative (0 disables)"))
        return errors

    def init_state(self, d: int) -> "OptimizerState":
        errors = self.validate()
        if errors:
            raise ConfigError(errors)
        return OptimizerState(
            kind=self.kind,
            d=d,
            momentum=self.momentum if self.kind == "shb" else 0.0,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            weight_decay=self.effective_weight_decay,
            clip=self.clip,
        )


@dataclass
class OptimizerState:
    """Buffers for one worker's optimizer. Owned by exactly one worker."""

    kind: str
    d: int
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip: float = 0.0
    t: int = 0
    buf: np.ndarray = field(default=None, repr=False)  # heavy-ball velocity
    m: np.ndarray = field(default=None, repr=False)  # adam first moment
    v: np.ndarray = field(default=None, repr=False)  # adam second moment

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigError([("optimizer.kind", None, f"unknown optimizer {self.kind!r}")])
        self.reset()

    def reset(self):
        self.t = 0
        self.buf = np.zeros(self.d)
        self.m = np.zeros(self.d)
        self.v = np.zeros(self.d)


def apply_step(state: OptimizerState, x, g, lr: float) -> np.ndarray:
    """Return the updated parameters; ``state`` buffers advance in place.

    sgd:   x - lr * g
    shb:   v <- momentum * v + g;  x - lr * v
    adamw: x <- x (1 - lr * wd), then the bias-corrected Adam step
    For sgd/shb a non-zero weight decay is added to the gradient (coupled L2).
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if x.shape != (state.d,) or g.shape != (state.d,):
        raise InputError(f"dimension mismatch: state d={state.d}, x {x.shape}, g {g.shape}")
    if lr < 0:
        raise InputError("learning rate must be non-negative")
    if not np.all(np.isfinite(g)):
        raise NumericalError(f"non-finite gradient at optimizer step {state.t + 1} (|x|={np.linalg.norm(x):.3g})")

    if state.clip > 0:
        gnorm = float(np.linalg.norm(g))
        if gnorm > state.clip:
            g = g * (state.clip / gnorm)

    state.t += 1
    if state.kind == "adamw":
        b1, b2 = state.beta1, state.beta2
        state.m = b1 * state.m + (1 - b1) * g
        state.v = b2 * state.v + (1 - b2) * g * g
        m_hat = state.m / (1 - b1**state.t)
        v_hat = state.v / (1 - b2**state.t)
        x = x * (1 - lr * state.weight_decay)
        return x - lr * m_hat / (np.sqrt(v_hat) + state.eps)

    if state.weight_decay:
        g = g + state.weight_decay * x
    if state.kind == "shb":
        state.buf = state.momentum * state.buf + g
        return x - lr * state.buf
    return x - lr * g


SCHEDULE_KINDS = ("constant", "warmup_cosine")


@dataclass(frozen=True)
class LrSchedule:
    """Learning rate keyed on cumulative samples processed.

    ``constant`` always returns ``peak``. ``warmup_cosine`` ramps linearly
    from 0 to ``peak`` over ``warmup`` samples, then follows a half cosine
    down to ``base`` at ``total`` samples and stays there.
    """

    kind: str = "constant"
    peak: float = 0.1
    base: float = 0.0
    warmup: int = 0
    total: int = 1

    def validate(self) -> list:
        errors = []
        if self.kind not in SCHEDULE_KINDS:
            errors.append(("schedule.kind", None, f"unknown schedule {self.kind!r}; expected one of {SCHEDULE_KINDS}"))
        if not self.peak > 0:
            errors.append(("schedule.lr", None, "peak learning rate must be positive"))
        if self.kind == "warmup_cosine":
            if not 0 < self.base <= self.peak:
                errors.append(("schedule.base_lr", None, "need 0 < base_lr <= peak lr"))
            if not 0 < self.warmup < self.total:
                errors.append(("schedule.warmup_samples", None, "need 0 < warmup_samples < total_samples"))
        return errors


def lr_at(schedule: LrSchedule, samples_processed) -> float:
    s = samples_processed
    if s < 0:
        raise InputError("samples_processed must be non-negative")
    if schedule.kind == "constant":
        return schedule.peak
    if s < schedule.warmup:
        return schedule.peak * s / schedule.warmup
    progress = min(1.0, (s - schedule.warmup) / (schedule.total - schedule.warmup))
    return schedule.base + 0.5 * (schedule.peak - schedule.base) * (1.0 + math.cos(math.pi * progress))


def linear_scaled_lr(base_lr: float, batch: int, base_batch: int) -> float:
    """``base_lr * batch / base_batch`` with the batch ratio kept exact."""
    if batch < 1 or base_batch < 1:
        raise InputError("batch sizes must be positive")
    return float(Fraction(base_lr) * Fraction(batch, base_batch))


@dataclass
class ScheduleConfig:
    """File-level schedule description; ``lr = "auto"`` picks ``1/(10 L (H M + eta^2))``."""

    kind: str = "constant"
    lr: float | str = "auto"
    base_lr: float | None = None  # None -> lr / 10
    warmup_samples: int = 0
    total_samples: int | None = None  # None -> the run's sample budget

    def validate(self) -> list:
        errors = []
        if self.kind not in SCHEDULE_KINDS:
            errors.append(("schedule.kind", None, f"unknown schedule {self.kind!r}; expected one of {SCHEDULE_KINDS}"))
        if isinstance(self.lr, str):
            if self.lr != "auto":
                errors.append(("schedule.lr", None, f"lr must be a positive number or \"auto\", got {self.lr!r}"))
        elif not self.lr > 0:
            errors.append(("schedule.lr", None, "lr must be positive"))
        if self.warmup_samples < 0:
            errors.append(("schedule.warmup_samples", None, "warmup_samples must be non-negative"))
        return errors

    def resolve(self, *, L: float, local_steps: int, workers: int, eta: float, budget: int) -> LrSchedule:
        peak = auto_lr(L, local_steps, workers, eta) if self.lr == "auto" else float(self.lr)
        base = peak / 10 if self.base_lr is None else float(self.base_lr)
        total = budget if self.total_samples is None else int(self.total_samples)
        schedule = LrSchedule(self.kind, peak, base, int(self.warmup_samples), total)
        errors = schedule.validate()
        if errors:
            raise ConfigError(errors)
        return schedule


def auto_lr(L: float, local_steps: int, workers: int, eta: float) -> float:
    """Largest step size covered by the local-method convergence guarantees."""
    return 1.0 / (10.0 * L * (local_steps * workers + eta * eta))
