"""Noise schedules, forward noising, the epsilon-prediction loss and ancestral sampling.

Timesteps are 1-based everywhere in the public API (``t in {1..T}``); schedule
tables are stored 0-based so ``alpha_bars[t - 1]`` is the value at step ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

import numpy as np
import torch

Denoiser = Callable[[torch.Tensor, torch.Tensor, Any], torch.Tensor]


class ScheduleError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


class TrainingDivergenceError(RuntimeError):
    """Raised when a training loss becomes non-finite."""


class SamplingError(RuntimeError):
    """Raised when a reverse-process iterate becomes non-finite."""


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def check(self) -> None:
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ScheduleError("betas must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ScheduleError("alpha_bars must be strictly decreasing")

    def at(self, t: torch.Tensor, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(beta_t, alpha_t, alpha_bar_t) gathered for a tensor of 1-based steps."""
        idx = t.long().cpu().numpy() - 1
        if np.any(idx < 0) or np.any(idx >= self.T):
            raise ScheduleError(f"timestep out of range 1..{self.T}")
        return (
            torch.as_tensor(self.betas[idx], dtype=dtype),
            torch.as_tensor(self.alphas[idx], dtype=dtype),
            torch.as_tensor(self.alpha_bars[idx], dtype=dtype),
        )


def build_schedule(kind: str = "linear", T: int = 1000, beta_start: float = 1e-4,
                   beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if kind == "linear":
        if not 0 < beta_start <= beta_end < 1:
            raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        # beta bounds are ignored except for validation; 0.999 cap as in improved DDPM
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1 - ab[1:] / ab[:-1], 1e-8, 0.999)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    schedule = NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))
    schedule.check()
    return schedule


def _broadcast(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coef = coef.to(dtype=like.dtype, device=like.device)
    return coef.reshape(coef.shape + (1,) * (like.dim() - coef.dim()))


def forward_noise(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form q(z_t | z_0): sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    ``t`` is an int (same step for all of z0) or a 1-D tensor with one step per
    leading-dimension entry of z0.
    """
    if eps.shape != z0.shape:
        raise ShapeMismatchError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    if isinstance(t, int):
        t = torch.tensor(t)
    _, _, abar = schedule.at(t, dtype=torch.float64)
    abar = _broadcast(abar, z0) if abar.dim() else abar.to(z0.dtype)
    return abar.sqrt() * z0 + (1 - abar).sqrt() * eps


def predict_z0(z_t: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    _, _, abar = schedule.at(t, dtype=torch.float64)
    abar = _broadcast(abar, z_t)
    return (z_t - (1 - abar).sqrt() * eps) / abar.sqrt()


def posterior_mean(z_t: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Mean of p(z_{t-1} | z_t) under epsilon parameterization."""
    beta, alpha, abar = (_broadcast(c, z_t) for c in schedule.at(t, dtype=torch.float64))
    return (z_t - beta / (1 - abar).sqrt() * eps) / alpha.sqrt()


def posterior_std(t: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """sigma_t with the posterior variance beta_tilde; zero at t = 1."""
    idx = t.long().cpu().numpy() - 1
    abar = schedule.alpha_bars
    abar_prev = np.where(idx > 0, abar[np.maximum(idx - 1, 0)], 1.0)
    var = schedule.betas[idx] * (1 - abar_prev) / (1 - abar[idx])
    return torch.as_tensor(np.sqrt(var), dtype=torch.float64)


def denoising_loss(denoiser: Denoiser, z0: torch.Tensor, y: Any, schedule: NoiseSchedule,
                   rng: torch.Generator, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean squared error between injected and predicted noise.

    One timestep per batch entry is drawn uniformly from 1..T. ``mask`` (same
    shape as z0, or broadcastable) weights elements; padded entries get 0.
    """
    if not torch.isfinite(z0).all():
        raise TrainingDivergenceError("non-finite training input")
    batch = z0.shape[0]
    t = torch.randint(1, schedule.T + 1, (batch,), generator=rng)
    eps = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
    z_t = forward_noise(z0, t, eps, schedule)
    eps_hat = denoiser(z_t, t, y)
    err = (eps - eps_hat) ** 2
    if mask is None:
        loss = err.mean()
    else:
        mask = mask.to(err.dtype).expand_as(err)
        loss = (err * mask).sum() / mask.sum().clamp_min(1)
    if not torch.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite loss {loss.item()}")
    return loss


@torch.no_grad()
def ancestral_sample(denoiser: Denoiser, shape: Sequence[int], y: Any, schedule: NoiseSchedule,
                     rng: torch.Generator, clamp: Optional[tuple[float, float]] = None,
                     dtype=torch.float32) -> torch.Tensor:
    """DDPM reverse process from pure noise; clamping happens after the last step only."""
    z = torch.randn(tuple(shape), generator=rng, dtype=dtype)
    batch = shape[0]
    for step in range(schedule.T, 0, -1):
        t = torch.full((batch,), step, dtype=torch.long)
        eps_hat = denoiser(z, t, y)
        mean = posterior_mean(z, t, eps_hat, schedule).to(dtype)
        if step > 1:
            noise = torch.randn(tuple(shape), generator=rng, dtype=dtype)
            z = mean + _broadcast(posterior_std(t, schedule), z).to(dtype) * noise
        else:
            z = mean
        if not torch.isfinite(z).all():
            raise SamplingError(f"non-finite sample at step {step}")
    if clamp is not None:
        z = z.clamp(clamp[0], clamp[1])
    return z


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb
