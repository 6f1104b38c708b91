"""Cosine noise schedule, forward noising and the x0-prediction sampler step."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """alpha_bar[t] for t = 0..T; alpha_bar[0] == 1."""

    T: int
    s: float
    alpha_bar: np.ndarray

    def __post_init__(self):
        self.alpha_bar.setflags(write=False)

    def snr(self) -> np.ndarray:
        """alpha_bar / (1 - alpha_bar); infinite at t = 0."""
        with np.errstate(divide="ignore"):
            return self.alpha_bar / (1.0 - self.alpha_bar)

    def alpha_bar_at(self, t, like: torch.Tensor | None = None) -> torch.Tensor:
        t = torch.as_tensor(t)
        if (t < 0).any() or (t > self.T).any():
            raise ValueError(f"noise level outside [0, {self.T}]")
        ab = torch.tensor(self.alpha_bar, dtype=torch.float64)[t.long()]
        if like is not None:
            ab = ab.to(like.dtype)
        return ab

    def inference_levels(self, steps: int) -> list[int]:
        """``steps`` evenly spaced levels from T down to (exclusive) 0."""
        if not 1 <= steps <= self.T:
            raise ValueError(f"steps must be in [1, {self.T}], got {steps}")
        levels = np.round(np.linspace(self.T, 0, steps + 1)).astype(int)
        return [int(t) for t in levels[:-1]]


def build_cosine_schedule(T: int = 1000, s: float = 0.008) -> NoiseSchedule:
    """alpha_bar_t = f(t) / f(0) with f(t) = cos^2(((t / T + s) / (1 + s)) * pi / 2).

    No clipping is applied: the x0 sampler only needs alpha_bar, never the per-step betas.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not 0 < s < 0.1:
        raise ValueError(f"offset s must be in (0, 0.1), got {s}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
    alpha_bar = f / f[0]
    alpha_bar[0] = 1.0
    return NoiseSchedule(int(T), float(s), alpha_bar)


@dataclass
class NoisyTarget:
    x_t: torch.Tensor
    t: torch.Tensor
    epsilon: torch.Tensor


def _expand(coef: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return coef.reshape(coef.shape + (1,) * (x.ndim - coef.ndim))


def add_noise(x0, t, epsilon, schedule: NoiseSchedule) -> NoisyTarget:
    """x_t = sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps; ``t`` is a scalar or one level per batch row."""
    x0 = torch.as_tensor(x0)
    epsilon = torch.as_tensor(epsilon, dtype=x0.dtype)
    if epsilon.shape != x0.shape:
        raise ValueError(f"epsilon shape {tuple(epsilon.shape)} does not match x0 {tuple(x0.shape)}")
    t = torch.as_tensor(t)
    ab = _expand(schedule.alpha_bar_at(t, like=x0), x0)
    x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * epsilon
    return NoisyTarget(x_t, t, epsilon)


def denoise_step(x_t, x0_pred, t, schedule: NoiseSchedule, epsilon, t_prev=None) -> torch.Tensor:
    """Re-noise the predicted clean sample to level ``t_prev`` (default ``t - 1``).

    The network predicts x0 directly, so the next iterate is simply the forward process
    applied to the prediction; ``x_t`` is only used for shape checking.
    """
    x0_pred = torch.as_tensor(x0_pred)
    if torch.as_tensor(x_t).shape != x0_pred.shape:
        raise ValueError("x_t and x0_pred must have the same shape")
    t = int(t)
    if t < 1:
        raise ValueError("cannot denoise below level 0")
    if t > schedule.T:
        raise ValueError(f"noise level {t} above T={schedule.T}")
    t_prev = t - 1 if t_prev is None else int(t_prev)
    if not 0 <= t_prev < t:
        raise ValueError(f"target level {t_prev} must lie in [0, {t})")
    return add_noise(x0_pred, t_prev, epsilon, schedule).x_t
