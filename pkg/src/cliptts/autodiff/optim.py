"""Adam and the inverse-square-root warmup schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from ..errors import InvalidStep, NonFiniteGradient
from .tensor import Parameter


@dataclass(frozen=True)
class LrSchedule:
    """``scale * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)``."""

    d_model: int = 256
    warmup_steps: int = 4000
    scale: float = 1.0

    def __post_init__(self):
        if self.d_model < 1 or self.warmup_steps < 1 or self.scale <= 0:
            raise ValueError(f"invalid schedule {self}")

    def __call__(self, step: int) -> float:
        return noam_lr(self, step)


def noam_lr(schedule: LrSchedule, step: int) -> float:
    if step < 1:
        raise InvalidStep(f"learning-rate step must be >= 1, got {step}")
    return schedule.scale * schedule.d_model ** -0.5 * min(
        step ** -0.5, step * schedule.warmup_steps ** -1.5)


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of every parameter, in place.

    All gradients are checked before anything is touched, so a non-finite
    gradient leaves parameters and moments exactly as they were.
    """
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(f"non-finite gradient in {p.name or 'parameter'}")
    for p in params:
        g = p.grad
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1 - beta2) * np.square(g)
        # lr * m_hat / (sqrt(v_hat) + eps) with both bias corrections folded in
        denom = np.sqrt(p.adam_v / (1 - beta2 ** t))
        denom += eps
        update = np.divide(p.adam_m, denom, out=denom)
        update *= lr / (1 - beta1 ** t)
        p.data -= update


class Adam:
    """Holds the hyperparameters and the parameter list for :func:`adam_step`."""

    def __init__(self, params: Iterable[Parameter], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        adam_step(self.params, lr, self.beta1, self.beta2, self.eps)

    @property
    def step_count(self) -> int:
        return self.params[0].step_count if self.params else 0

