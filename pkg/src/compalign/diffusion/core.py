"""Forward noising, reverse denoising, one-step x0 prediction and the noise-matching loss.

``model`` everywhere is any callable ``eps(z, t, cond) -> tensor`` with the
shape of ``z``; ``t`` is a long tensor of shape ``(B,)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from ..errors import EmptyInputError, RangeError
from .schedule import NoiseSchedule

EpsModel = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class LatentState:
    z: torch.Tensor
    t: int

    def check(self, schedule: NoiseSchedule, shape: Optional[Sequence[int]] = None):
        schedule.check(self.t)
        if shape is not None and tuple(self.z.shape[-len(shape):]) != tuple(shape):
            raise ValueError(f"latent shape {tuple(self.z.shape)} does not end with {tuple(shape)}")
        return self


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Gather per-sample schedule values, shaped to broadcast against ``like``."""
    idx = torch.as_tensor(t, dtype=torch.long)
    v = torch.as_tensor(values, dtype=like.dtype)[idx]
    if v.ndim == 0:
        return v
    return v.reshape(-1, *([1] * (like.ndim - 1)))


def _tvec(t, batch: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    return t.expand(batch) if t.ndim == 0 else t


def forward_sample(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form q(z_t | z_0): sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    schedule.check(t)
    ab = schedule.alpha_bars
    return _coef(np.sqrt(ab), t, z0) * z0 + _coef(np.sqrt(1.0 - ab), t, z0) * eps


def forward_step(z_prev: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """One Markov step q(z_t | z_{t-1})."""
    b = schedule.beta(t)
    return math.sqrt(1.0 - b) * z_prev + math.sqrt(b) * eps


def _eps_coef(schedule: NoiseSchedule) -> np.ndarray:
    # beta_t / sqrt(1 - abar_t), defined as 0 where beta_t = 0 (identity step)
    ab = schedule.alpha_bars[1:]
    b = schedule.betas
    out = np.zeros_like(b)
    nz = b > 0
    out[nz] = b[nz] / np.sqrt(1.0 - ab[nz])
    return np.concatenate([[0.0], out])


def posterior_mean(z: torch.Tensor, t, eps_hat: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    alphas = np.concatenate([[1.0], 1.0 - schedule.betas])
    return (z - _coef(_eps_coef(schedule), t, z) * eps_hat) / _coef(np.sqrt(alphas), t, z)


def sigmas(schedule: NoiseSchedule) -> np.ndarray:
    """sigma_t indexed by t; sigma_t^2 = beta_t except sigma_0 = sigma_1 = 0."""
    s = np.concatenate([[0.0], np.sqrt(schedule.betas)])
    s[1] = 0.0
    return s


def denoise_step(state: LatentState, model: EpsModel, cond: torch.Tensor, schedule: NoiseSchedule,
                 generator: Optional[torch.Generator] = None, noise: Optional[torch.Tensor] = None) -> LatentState:
    """One ancestral step z_t -> z_{t-1}."""
    if state.t < 1:
        raise RangeError("cannot denoise below t = 0")
    schedule.check(state.t, low=1)
    z = state.z
    t = _tvec(state.t, z.shape[0])
    mean = posterior_mean(z, state.t, model(z, t, cond), schedule)
    sigma = float(sigmas(schedule)[state.t])
    if sigma > 0:
        if noise is None:
            noise = torch.randn(z.shape, generator=generator, dtype=z.dtype)
        mean = mean + sigma * noise
    return LatentState(mean, state.t - 1)


def predict_x0(state: LatentState, model: EpsModel, cond: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """One-step clean-latent estimate (z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)."""
    schedule.check(state.t)
    if state.t == 0:
        return state.z
    z = state.z
    eps_hat = model(z, _tvec(state.t, z.shape[0]), cond)
    return x0_from_eps(z, state.t, eps_hat, schedule)


def x0_from_eps(z: torch.Tensor, t, eps_hat: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    ab = schedule.alpha_bars
    return (z - _coef(np.sqrt(1.0 - ab), t, z) * eps_hat) / _coef(np.sqrt(ab), t, z)


def diffusion_loss(model: EpsModel, z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, cond: torch.Tensor,
                   schedule: NoiseSchedule) -> torch.Tensor:
    """Per-sample mean squared noise residual, shape ``(B,)``."""
    schedule.check(t, low=1)
    zt = forward_sample(z0, t, eps, schedule)
    resid = eps - model(zt, t, cond)
    return resid.pow(2).flatten(1).mean(1)


def training_loss(model: EpsModel, z0: torch.Tensor, cond: torch.Tensor, schedule: NoiseSchedule,
                  generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Batch mean of the noise-matching loss with t ~ U{1..T} and fresh Gaussian noise."""
    if z0.shape[0] == 0:
        raise EmptyInputError("training batch is empty")
    t = torch.randint(1, schedule.T + 1, (z0.shape[0],), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    return diffusion_loss(model, z0, t, eps, cond, schedule).mean()


def reverse_chain(z: torch.Tensor, t_from: int, t_to: int, model: EpsModel, cond: torch.Tensor,
                  schedule: NoiseSchedule, generator: Optional[torch.Generator] = None,
                  hook: Optional[Callable[[LatentState], LatentState]] = None) -> torch.Tensor:
    """Run ancestral steps from ``t_from`` down to ``t_to``; ``hook`` may rewrite each new state."""
    schedule.check(t_from)
    schedule.check(t_to)
    state = LatentState(z, t_from)
    while state.t > t_to:
        state = denoise_step(state, model, cond, schedule, generator)
        if hook is not None:
            state = hook(state)
    return state.z


@torch.no_grad()
def sample_latents(model: EpsModel, cond: torch.Tensor, schedule: NoiseSchedule, shape: Sequence[int],
                   generator: Optional[torch.Generator] = None) -> torch.Tensor:
    z = torch.randn((cond.shape[0], *shape), generator=generator)
    return reverse_chain(z, schedule.T, 0, model, cond, schedule, generator)


def sample(model: EpsModel, cond: torch.Tensor, schedule: NoiseSchedule, codec, shape: Sequence[int],
           seed: int = 0) -> np.ndarray:
    """Full T -> 0 chain from standard normal, decoded to uint8 images ``(B, H, W, 3)``."""
    g = torch.Generator().manual_seed(seed)
    return codec.decode(sample_latents(model, cond, schedule, shape, g))
