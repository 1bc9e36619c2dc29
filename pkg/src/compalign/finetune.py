"""Accuracy-weighted fine-tuning.

Each iteration takes two gradient-descent steps with separate optimizers:

1. the ordinary noise-matching loss on a batch of dataset pairs (rate ``alpha1``);
2. a reward-weighted step: generate from fresh prompts, stop the reverse
   chain ``t`` steps before the end, predict the clean image in one shot,
   score it by QA accuracy and use that accuracy as a constant weight on the
   noise-matching loss around the prediction (rate ``alpha2``).

Only the final denoising step and the one-shot prediction are tracked by
autograd; the earlier chain runs under ``no_grad``.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .diffusion.checkpoint import atomic_write_bytes, save_checkpoint
from .diffusion.codec import IdentityCodec
from .diffusion.core import LatentState, denoise_step, forward_sample, predict_x0, reverse_chain
from .diffusion.model import Denoiser
from .diffusion.schedule import NoiseSchedule
from .diffusion.train import loss_weights, weighted_training_loss
from .errors import BackendError, DivergenceError, EmptyInputError, ProtocolError, RangeError
from .qa import OracleQaGenerator, QaGenerator
from .scene import SceneSpec, describe
from .vqa import VqaBackend, evaluate, make_vqa_backend

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FinetuneConfig:
    alpha1: float = 1e-5
    alpha2: float = 1e-5
    t_range: tuple[int, int] = (1, 10)
    batch_size: int = 64
    max_iterations: int = 100
    eval_backend: str = "oracle"
    seed: int = 0
    optimizer: str = "adam"
    layout_dropout: float = 0.5
    weighting: str = "v"  # dataset branch loss weighting, as in pretraining
    loss_t: str = "tracked"  # timestep of the weighted residual: the sampled t, or "uniform" over 1..T
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "t_range", tuple(int(x) for x in self.t_range))
        t1, t2 = self.t_range
        if not 1 <= t1 <= t2:
            raise ValueError(f"t_range must satisfy 1 <= t1 <= t2, got {self.t_range}")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.batch_size < 1 or self.max_iterations < 0:
            raise ValueError("batch_size must be >= 1 and max_iterations >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.weighting not in ("eps", "v"):
            raise ValueError(f"unknown loss weighting {self.weighting!r}")
        if self.loss_t not in ("uniform", "tracked"):
            raise ValueError(f"unknown loss timestep mode {self.loss_t!r}")

    def check_schedule(self, schedule: NoiseSchedule) -> None:
        if self.t_range[1] > schedule.T:
            raise ValueError(f"t_range {self.t_range} exceeds T = {schedule.T}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["t_range"] = list(self.t_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    pretrain_loss: float
    acc: Optional[float]
    weighted_loss: Optional[float]
    wall_time: float
    t: int
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FinetuneTrace:
    records: list = field(default_factory=list)

    def append(self, rec: TraceRecord) -> None:
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.records)

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_jsonl().encode("utf-8"))

    @property
    def accs(self) -> list[float]:
        return [r.acc for r in self.records if r.acc is not None]


def weighted_loss(acc: Union[float, torch.Tensor], z_t: torch.Tensor, t, eps: torch.Tensor, cond: torch.Tensor,
                  model) -> torch.Tensor:
    """Batch mean of ``acc_i * mean((eps - eps_theta(z_t, t, cond))^2)``; acc is a constant weight."""
    acc = torch.as_tensor(acc, dtype=z_t.dtype).detach()
    if torch.any(acc < 0) or torch.any(acc > 1) or torch.any(torch.isnan(acc)):
        raise RangeError(f"accuracy weight outside [0, 1]: {acc}")
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim == 0:
        t = t.expand(z_t.shape[0])
    per_sample = (eps - model(z_t, t, cond)).pow(2).flatten(1).mean(1)
    return (acc * per_sample).mean()


class _Optim:
    def __init__(self, params, lr: float, kind: str):
        cls = torch.optim.Adam if kind == "adam" else torch.optim.SGD
        self.opt = cls(params, lr=lr) if lr > 0 else None

    def step(self, loss: torch.Tensor) -> None:
        if self.opt is None:
            return
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()


class Finetuner:
    """Holds the model, both optimizers and the scoring backends across iterations."""

    def __init__(self, model: Denoiser, schedule: NoiseSchedule, config: FinetuneConfig,
                 qa_generator: Optional[QaGenerator] = None, backend: Optional[VqaBackend] = None):
        config.check_schedule(schedule)
        self.model = model
        self.schedule = schedule
        self.config = config
        self.codec = IdentityCodec()
        self.qa = qa_generator or OracleQaGenerator()
        self.backend = backend or make_vqa_backend(config.eval_backend, model.config.grid_size)
        self.opt1 = _Optim(model.parameters(), config.alpha1, config.optimizer)
        self.opt2 = _Optim(model.parameters(), config.alpha2, config.optimizer)
        self.latent_shape = (3, model.config.canvas, model.config.canvas)
        self.t_weights = loss_weights(schedule, config.weighting)

    def pretrain_step(self, scenes: Sequence[SceneSpec], images: np.ndarray, g: torch.Generator,
                      rng: np.random.Generator) -> float:
        enc = self.model.encoder
        keep = rng.random(len(scenes)) >= self.config.layout_dropout
        cond = enc.encode_batch(scenes, [bool(k) for k in keep])
        loss = weighted_training_loss(self.model, self.codec.encode(images), cond, self.schedule, g,
                                      self.t_weights)
        self._check(loss, "pretraining")
        self.opt1.step(loss)
        return loss.item()

    def generate_tracked(self, cond: torch.Tensor, t: int, g: torch.Generator) -> torch.Tensor:
        """z_T -> z_{t+1} untracked, then one tracked step and a one-shot clean prediction."""
        z = torch.randn((cond.shape[0], *self.latent_shape), generator=g)
        with torch.no_grad():
            z = reverse_chain(z, self.schedule.T, t + 1, self.model, cond, self.schedule, g)
        state = denoise_step(LatentState(z, t + 1), self.model, cond, self.schedule, g)
        return predict_x0(state, self.model, cond, self.schedule)

    def score(self, scenes: Sequence[SceneSpec], images: np.ndarray) -> list[float]:
        accs = []
        for s, img in zip(scenes, images):
            pairs = self.qa.generate(describe(s))
            accs.append(evaluate(img, pairs, self.backend).acc)
        return accs

    def reward_step(self, scenes: Sequence[SceneSpec], t: int, g: torch.Generator) -> tuple[float, float]:
        cond = self.model.encoder.encode_batch(scenes, False)
        z0_hat = self.generate_tracked(cond, t, g)
        accs = self.score(scenes, self.codec.decode(z0_hat))
        if self.config.loss_t == "uniform":
            t = torch.randint(1, self.schedule.T + 1, (len(scenes),), generator=g)
        eps = torch.randn(z0_hat.shape, generator=g)
        z_t = forward_sample(z0_hat, t, eps, self.schedule)
        loss = weighted_loss(torch.tensor(accs), z_t, t, eps, cond, self.model)
        self._check(loss, "weighted")
        # an all-zero weight carries no gradient; skipping keeps stateful optimizers from drifting
        if any(a > 0 for a in accs):
            self.opt2.step(loss)
        return float(np.mean(accs)), loss.item()

    def iteration(self, i: int, pair_scenes, pair_images, fresh_scenes) -> TraceRecord:
        start = time.time()
        g = torch.Generator().manual_seed(self.config.seed * 1_000_003 + i)
        rng = np.random.default_rng([self.config.seed, i])
        t1, t2 = self.config.t_range
        t = int(rng.integers(t1, t2 + 1))
        assert t1 <= t <= t2
        self.model.train()
        pl = self.pretrain_step(pair_scenes, pair_images, g, rng)
        acc = wl = err = None
        try:
            acc, wl = self.reward_step(fresh_scenes, t, g)
        except (BackendError, ProtocolError) as exc:
            err = f"{type(exc).__name__}: {exc}"
            log.warning("iteration %d: scoring failed, weighted step skipped: %s", i, err)
        self.model.eval()
        return TraceRecord(i, pl, acc, wl, time.time() - start, t, err)

    @staticmethod
    def _check(loss: torch.Tensor, what: str) -> None:
        if not math.isfinite(loss.item()):
            raise DivergenceError(f"non-finite {what} loss")


def finetune_iteration(model: Denoiser, schedule: NoiseSchedule, dataset_pair, fresh_scenes, config: FinetuneConfig,
                       iteration: int = 0, backend: Optional[VqaBackend] = None) -> tuple[Denoiser, TraceRecord]:
    """Single iteration with fresh optimizers; ``dataset_pair`` is ``(scenes, images)``."""
    ft = Finetuner(model, schedule, config, backend=backend)
    scenes, images = dataset_pair
    return model, ft.iteration(iteration, scenes, np.asarray(images), fresh_scenes)


def run_finetune(model: Denoiser, schedule: NoiseSchedule, dataset: Sequence[tuple[SceneSpec, np.ndarray]],
                 scenes: Sequence[SceneSpec], config: FinetuneConfig, backend: Optional[VqaBackend] = None,
                 qa_generator: Optional[QaGenerator] = None, trace_path=None,
                 time_budget: Optional[float] = None) -> tuple[Denoiser, FinetuneTrace]:
    """Iterate over cyclic shuffled streams of dataset pairs and fresh scenes.

    On a non-finite loss the model is restored to the last good weights and
    :class:`DivergenceError` is raised with them attached.  ``time_budget``
    (seconds) stops early after the iteration that crosses it.
    """
    if not dataset or not scenes:
        raise EmptyInputError("fine-tuning needs a nonempty dataset and scene list")
    ft = Finetuner(model, schedule, config, qa_generator, backend)
    trace = FinetuneTrace()
    images = np.stack([img for _, img in dataset])
    pair_scenes = [s for s, _ in dataset]
    rng = np.random.default_rng(config.seed)
    b = config.batch_size

    def stream(n):
        while True:
            perm = rng.permutation(n)
            for k in range(0, n - min(b, n) + 1, min(b, n)):
                yield perm[k : k + min(b, n)]

    pairs, fresh = stream(len(dataset)), stream(len(scenes))
    last_good = copy.deepcopy(model.state_dict())
    started = time.time()
    for i in range(config.max_iterations):
        pi, fi = next(pairs), next(fresh)
        try:
            rec = ft.iteration(i, [pair_scenes[k] for k in pi], images[pi], [scenes[k] for k in fi])
        except DivergenceError as exc:
            model.load_state_dict(last_good)
            if config.checkpoint_dir:
                save_checkpoint(Path(config.checkpoint_dir) / "finetune_last_good.ckpt", model, schedule,
                                {"iteration": i})
            raise DivergenceError(f"iteration {i}: {exc}", last_good) from exc
        trace.append(rec)
        last_good = copy.deepcopy(model.state_dict())
        log.info("iter %d t=%d pretrain %.4f acc %s (%.1fs)", i, rec.t, rec.pretrain_loss, rec.acc, rec.wall_time)
        if config.checkpoint_dir and config.checkpoint_every and (i + 1) % config.checkpoint_every == 0:
            save_checkpoint(Path(config.checkpoint_dir) / f"finetune_i{i + 1:05d}.ckpt", model, schedule,
                            {"iteration": i + 1})
        if trace_path is not None:
            trace.save(trace_path)
        if time_budget is not None and time.time() - started > time_budget:
            log.info("time budget reached after %d iterations", i + 1)
            break
    model.eval()
    return model, trace
