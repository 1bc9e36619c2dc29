"""Pretraining loop for the denoiser on (scene, render) pairs."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from ..errors import DivergenceError, EmptyInputError
from ..scene import SceneSpec
from .checkpoint import save_checkpoint
from .codec import IdentityCodec
from .core import diffusion_loss
from .model import Denoiser, DenoiserConfig
from .schedule import NoiseSchedule, linear_schedule

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    T: int = 50
    seed: int = 0
    layout_dropout: float = 0.5
    ema_decay: float = 0.999
    grad_clip: float = 1.0
    channels: int = 32
    prediction: str = "v"
    weighting: str = "v"  # "v": scale each sample's noise loss by 1 / abar_t, i.e. the v-space loss
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.weighting not in ("eps", "v"):
            raise ValueError(f"unknown loss weighting {self.weighting!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PretrainResult:
    model: Denoiser
    schedule: NoiseSchedule
    epoch_losses: list = field(default_factory=list)
    initial_loss: float = float("nan")


def encode_dataset(model: Denoiser, scenes: Sequence[SceneSpec]) -> tuple[torch.Tensor, torch.Tensor]:
    """Text-only and layout conditioning for every scene."""
    enc = model.encoder
    return enc.encode_batch(scenes, False), enc.encode_batch(scenes, True)


@torch.no_grad()
def ema_update(target: torch.nn.Module, source: torch.nn.Module, decay: float) -> None:
    for pt, ps in zip(target.parameters(), source.parameters()):
        pt.mul_(decay).add_(ps, alpha=1.0 - decay)
    for bt, bs in zip(target.buffers(), source.buffers()):
        bt.copy_(bs)


def loss_weights(schedule: NoiseSchedule, weighting: str) -> torch.Tensor:
    """Per-timestep multipliers on the noise-matching loss, indexed by t."""
    if weighting == "v":
        return torch.as_tensor(1.0 / schedule.alpha_bars, dtype=torch.float32)
    return torch.ones(schedule.T + 1)


def weighted_training_loss(model, z0, cond, schedule, generator, weights) -> torch.Tensor:
    if z0.shape[0] == 0:
        raise EmptyInputError("training batch is empty")
    t = torch.randint(1, schedule.T + 1, (z0.shape[0],), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    return (diffusion_loss(model, z0, t, eps, cond, schedule) * weights[t].to(z0.dtype)).mean()


def pretrain(dataset: Sequence[tuple[SceneSpec, np.ndarray]], config: PretrainConfig = PretrainConfig(),
             model: Optional[Denoiser] = None, schedule: Optional[NoiseSchedule] = None) -> PretrainResult:
    """Minimise the noise-matching loss with Adam; returns the EMA weights when enabled.

    A non-finite batch loss aborts with :class:`DivergenceError` carrying the
    last good state dict.
    """
    if not dataset:
        raise EmptyInputError("pretraining dataset is empty")
    torch.manual_seed(config.seed)
    scenes = [s for s, _ in dataset]
    canvas = scenes[0].canvas
    schedule = schedule or linear_schedule(config.T)
    if model is None:
        model = Denoiser(DenoiserConfig(canvas=canvas, grid_size=scenes[0].grid_size, channels=config.channels,
                                        prediction=config.prediction), schedule.alpha_bars)
    codec = IdentityCodec()
    z0_all = codec.encode(np.stack([img for _, img in dataset]))
    c_text, c_layout = encode_dataset(model, scenes)

    g = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    ema = copy.deepcopy(model) if config.ema_decay > 0 else None
    result = PretrainResult(model, schedule)
    n = len(dataset)
    last_good = copy.deepcopy(model.state_dict())
    step = 0
    weights = loss_weights(schedule, config.weighting)

    for epoch in range(config.epochs):
        model.train()
        t0 = time.time()
        perm = rng.permutation(n)
        losses = []
        for i in range(0, n, config.batch_size):
            idx = torch.as_tensor(perm[i : i + config.batch_size])
            keep = torch.as_tensor(rng.random(len(idx)) >= config.layout_dropout)[:, None]
            cond = torch.where(keep, c_layout[idx], c_text[idx])
            loss = weighted_training_loss(model, z0_all[idx], cond, schedule, g, weights)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {i // config.batch_size}", last_good)
            opt.zero_grad()
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            step += 1
            if ema is not None:
                # warm-up so short runs are not dominated by the initial weights
                ema_update(ema, model, min(config.ema_decay, (1 + step) / (10 + step)))
            losses.append(loss.item())
            if not result.epoch_losses and i == 0:
                result.initial_loss = losses[0]
        last_good = copy.deepcopy(model.state_dict())
        result.epoch_losses.append(float(np.mean(losses)))
        log.info("epoch %d loss %.4f (%.1fs)", epoch, result.epoch_losses[-1], time.time() - t0)
        if config.checkpoint_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            out = ema if ema is not None else model
            save_checkpoint(Path(config.checkpoint_dir) / f"pretrain_e{epoch + 1:04d}.ckpt", out, schedule,
                            {"epoch": epoch + 1, "loss": result.epoch_losses[-1]})

    if ema is not None and config.epochs > 0:
        result.model = ema
    result.model.eval()
    return result
