"""Diffusion timestep coefficient schedules.

A schedule of length T holds, per step t (1-based):

    beta_t          noise variance added at step t
    alpha_t   = 1 - beta_t
    alpha_bar_t = prod_{s<=t} alpha_s

Coefficients are kept in float64; callers cast to the latent dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ParameterError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep diffusion coefficients for a chain of length T."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.T < 1:
            raise ParameterError(f"T must be >= 1, got {self.T}")
        for name in ("betas", "alphas", "alpha_bars"):
            arr = getattr(self, name)
            if arr.shape != (self.T,):
                raise ParameterError(f"{name} must have shape ({self.T},)")
        if not (0.0 < self.betas.min() and self.betas.max() < 1.0):
            raise ParameterError("betas must lie strictly inside (0, 1)")
        if self.T > 1 and not np.all(np.diff(self.alpha_bars) < 0):
            raise ParameterError("alpha_bars must be strictly decreasing")

    def alpha_bar(self, t: int) -> float:
        """Cumulative alpha at 1-based step t, with alpha_bar(0) == 1."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ParameterError(f"t={t} outside [0, {self.T}]")
        return float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ParameterError(f"t={t} outside [1, {self.T}]")
        return float(self.betas[t - 1])


def make_schedule(
    T: int,
    kind: str = "linear",
    beta_min: float = 1e-4,
    beta_max: float = 2e-2,
) -> NoiseSchedule:
    """Build a noise schedule.

    ``linear`` spaces betas evenly in [beta_min, beta_max].  ``cosine``
    derives betas from the squared-cosine cumulative curve and clips them
    into [beta_min, beta_max].
    """
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ParameterError(
            f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )

    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1.0 + s) * math.pi / 2.0) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], beta_min, beta_max)
    else:
        raise ParameterError(f"unknown schedule kind {kind!r}")

    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)
