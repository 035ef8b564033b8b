"""Gradient-ascent enhancement of an input toward the defect logit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deltaiou.autodiff import backward_from_logit, forward_trace
from deltaiou.model import POSITIVE


@dataclass(frozen=True)
class EnhancementConfig:
    alpha: float = 0.01
    iterations: int = 2
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.iterations < 0 or int(self.iterations) != self.iterations:
            raise ValueError(f"iterations must be a nonnegative integer, got {self.iterations}")
        if self.lo >= self.hi:
            raise ValueError("clamp range is empty")


def enhance(image: np.ndarray, model, config: EnhancementConfig = EnhancementConfig()) -> np.ndarray:
    """``x <- clip(x + alpha * d(logit_1)/dx)``, repeated ``config.iterations`` times.

    The raw gradient is used, not its sign; there is no perturbation budget.
    """
    shape = np.shape(image)
    x = np.array(image, dtype=np.float32).reshape(model.input_shape)
    alpha = np.float32(config.alpha)
    for _ in range(config.iterations):
        trace = forward_trace(model, x)
        grad = backward_from_logit(trace, model, POSITIVE).input_grad
        x = np.clip(x + alpha * grad, config.lo, config.hi).astype(np.float32)
    return x.reshape(shape)
