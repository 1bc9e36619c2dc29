from __future__ import annotations

from typing import Protocol

import numpy as np
import torch


class Codec(Protocol):
    def encode(self, images: np.ndarray) -> torch.Tensor: ...

    def decode(self, latents: torch.Tensor) -> np.ndarray: ...

    def latent_mask(self, mask: np.ndarray) -> torch.Tensor: ...


class IdentityCodec:
    """Pixel-space codec: uint8 ``(..., H, W, 3)`` <-> float ``(..., 3, H, W)`` in [-1, 1].

    The affine rescale is exactly invertible on uint8 values, so
    ``decode(encode(x)) == x`` bit for bit.
    """

    def __init__(self, dtype=torch.float32):
        self.dtype = dtype

    def encode(self, images: np.ndarray) -> torch.Tensor:
        x = torch.from_numpy(np.ascontiguousarray(images)).to(self.dtype)
        x = x / 127.5 - 1.0
        return x.movedim(-1, -3).contiguous()

    def decode(self, latents: torch.Tensor) -> np.ndarray:
        x = latents.detach().movedim(-3, -1)
        x = torch.round((x.clamp(-1.0, 1.0) + 1.0) * 127.5)
        return x.to(torch.uint8).cpu().numpy()

    def latent_mask(self, mask: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(mask)).to(self.dtype)[..., None, :, :]
