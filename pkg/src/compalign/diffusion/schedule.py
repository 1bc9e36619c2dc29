from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import RangeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise variances beta_1..beta_T and their cumulative products.

    ``alpha_bars`` is indexed by timestep, with ``alpha_bars[0] == 1``.
    Zero betas are accepted so that degenerate schedules can be built for
    testing; :attr:`is_strict` reports whether every beta lies in (0, 1).
    """

    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64).reshape(-1)
        if b.size == 0:
            raise ValueError("schedule needs at least one step")
        if np.any(b < 0) or np.any(b >= 1) or not np.all(np.isfinite(b)):
            raise ValueError("betas must lie in [0, 1)")
        b.setflags(write=False)
        object.__setattr__(self, "betas", b)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def beta(self, t: int) -> float:
        self.check(t, low=1)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return 1.0 - self.beta(t)

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    def alpha_bar(self, t: int) -> float:
        self.check(t)
        return float(self.alpha_bars[t])

    @property
    def is_strict(self) -> bool:
        ab = self.alpha_bars
        return bool(np.all(self.betas > 0) and np.all(np.diff(ab) < 0))

    def check(self, t, low: int = 0) -> None:
        arr = np.asarray(t)
        if arr.size and (arr.min() < low or arr.max() > self.T):
            raise RangeError(f"timestep {t} outside [{low}, {self.T}]")

    def to_dict(self) -> dict:
        return {"T": self.T, "betas": [float(x) for x in self.betas]}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(np.asarray(d["betas"], dtype=np.float64))


def linear_schedule(T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02,
                    rescale: bool = True) -> NoiseSchedule:
    """Linear betas; with ``rescale`` the endpoints are stretched by 1000 / T.

    The usual 1e-4..0.02 endpoints assume T = 1000.  Left unscaled at T = 50
    they keep 60 % of the signal at the last step, so sampling from pure noise
    would start far off the training distribution.
    """
    if rescale:
        k = 1000.0 / T
        beta_start, beta_end = beta_start * k, beta_end * k
        if beta_end >= 1:
            raise ValueError(f"T = {T} is too short for a rescaled linear schedule (beta_T = {beta_end:g})")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))
