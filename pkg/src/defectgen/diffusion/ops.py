"""Core diffusion operations over a frozen backbone.

Forward process, training loss, and reverse sampling.  All operations
take the timestep convention of schedule.py: t runs 1..T, and
alpha_bar(0) == 1 so that t_prev = 0 means "fully denoised".
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import torch

from ..errors import ParameterError, ShapeError
from .schedule import NoiseSchedule


def add_noise(schedule: NoiseSchedule, z0: torch.Tensor, t: int,
              eps: torch.Tensor) -> torch.Tensor:
    """Diffuse a clean latent to step t: sqrt(abar_t) z0 + sqrt(1-abar_t) eps."""
    if eps.shape != z0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    abar = schedule.alpha_bar(t)
    return math.sqrt(abar) * z0 + math.sqrt(1.0 - abar) * eps


def ldm_loss(model, schedule: NoiseSchedule, z0: torch.Tensor, t: int,
             cond: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Noise-prediction MSE at a single timestep.

    Mean over all latent entries of (eps - eps_hat)^2 where eps_hat is
    the model's prediction at the noised latent.
    """
    z_t = add_noise(schedule, z0, t, eps)
    eps_hat = model.predict_noise(z_t, t, cond)
    return ((eps - eps_hat) ** 2).mean()


def _predict_z0(schedule: NoiseSchedule, z_t: torch.Tensor, t: int,
                eps_hat: torch.Tensor) -> torch.Tensor:
    abar_t = schedule.alpha_bar(t)
    return (z_t - math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(abar_t)


def denoise_step(model, schedule: NoiseSchedule, z_t: torch.Tensor, t: int,
                 cond: torch.Tensor, *, t_prev: Optional[int] = None,
                 sampler: str = "deterministic",
                 generator: Optional[torch.Generator] = None,
                 clip_denoised: Optional[float] = None) -> torch.Tensor:
    """One reverse step from t to t_prev (default t-1).

    Both samplers route through the predicted clean latent.
    "deterministic" re-noises it to t_prev with the implied noise.
    "ancestral" adds fresh gaussian noise with the posterior variance
    for the (t, t_prev) jump, none on the final step; at consecutive
    steps this is the textbook reverse-process posterior.  clip_denoised
    bounds the clean-latent estimate, which keeps a weak model's errors
    from compounding across steps; None leaves the pure update.
    """
    if not 1 <= t <= schedule.T:
        raise ParameterError(f"t={t} outside 1..{schedule.T}")
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise ParameterError(f"t_prev={t_prev} must satisfy 0 <= t_prev < t={t}")

    eps_hat = model.predict_noise(z_t, t, cond)
    abar_t = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t_prev)
    z0_hat = _predict_z0(schedule, z_t, t, eps_hat)
    if clip_denoised is not None:
        z0_hat = z0_hat.clamp(-clip_denoised, clip_denoised)
        eps_hat = (z_t - math.sqrt(abar_t) * z0_hat) / math.sqrt(1.0 - abar_t)

    if sampler == "deterministic":
        return math.sqrt(abar_prev) * z0_hat + math.sqrt(1.0 - abar_prev) * eps_hat
    if sampler == "ancestral":
        var = (1.0 - abar_prev) / (1.0 - abar_t) * (1.0 - abar_t / abar_prev)
        mean = (
            math.sqrt(abar_prev) * z0_hat
            + math.sqrt(max(1.0 - abar_prev - var, 0.0)) * eps_hat
        )
        if t_prev == 0:
            return mean
        noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
        return mean + math.sqrt(var) * noise
    raise ParameterError(f"unknown sampler {sampler!r}")


def step_schedule(T: int, n_steps: int) -> list[int]:
    """Evenly spaced decreasing timesteps from T down, ending at 1.

    With n_steps == T this is T, T-1, ..., 1.
    """
    if not 1 <= n_steps <= T:
        raise ParameterError(f"n_steps={n_steps} outside 1..{T}")
    idx = torch.linspace(T, 1, n_steps).round().long().tolist()
    # Deduplicate while preserving order; rounding can collide for small T.
    out: list[int] = []
    for t in idx:
        if not out or t < out[-1]:
            out.append(int(t))
    if out[-1] != 1:
        out.append(1)
    return out


def denoise_loop(model, schedule: NoiseSchedule, z_T: torch.Tensor,
                 cond: torch.Tensor, *, n_steps: Optional[int] = None,
                 sampler: str = "deterministic",
                 generator: Optional[torch.Generator] = None,
                 timesteps: Optional[Sequence[int]] = None,
                 clip_denoised: Optional[float] = None) -> torch.Tensor:
    """Run the full reverse chain from z_T to a clean latent estimate."""
    if timesteps is None:
        timesteps = step_schedule(schedule.T, n_steps or schedule.T)
    z = z_T
    for i, t in enumerate(timesteps):
        t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else 0
        z = denoise_step(model, schedule, z, t, cond, t_prev=t_prev,
                         sampler=sampler, generator=generator,
                         clip_denoised=clip_denoised)
    return z
