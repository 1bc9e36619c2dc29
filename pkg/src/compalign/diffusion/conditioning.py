"""Prompt/scene to conditioning-vector encoder.

Layout of the vector::

    [ group counts (8 colours x 3 shapes)
    | relation indicators (24 x 24 ordered group pairs x {left, above})
    | layout flag
    | per-cell layout (grid x grid x [occupied, shape one-hot, colour one-hot, scale]) ]

The first two blocks are a function of the prompt text alone, so a scene and
its description encode identically.  The layout block is only filled for
explicit scene fragments (local edits); text prompts leave it and the flag at
zero.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np
import torch

from ..scene import COLORS, SHAPES, PromptText, SceneSpec, describe, parse_prompt

N_GROUPS = len(COLORS) * len(SHAPES)
RELATIONS = ("left", "above")
CELL_FEATURES = 1 + len(SHAPES) + len(COLORS) + 1


def group_index(key: tuple[str, str]) -> int:
    return COLORS.index(key[0]) * len(SHAPES) + SHAPES.index(key[1])


class ConditioningEncoder:
    def __init__(self, grid_size: int = 4):
        self.grid_size = grid_size
        self.n_rel = N_GROUPS * N_GROUPS * len(RELATIONS)
        self.global_dim = N_GROUPS + self.n_rel + 1
        self.layout_dim = grid_size * grid_size * CELL_FEATURES
        self.dim = self.global_dim + self.layout_dim

    def encode(self, item: Union[SceneSpec, PromptText, str], layout: bool = False) -> np.ndarray:
        """Encode a prompt or scene; ``layout=True`` also pins object cells (scenes only)."""
        vec = np.zeros(self.dim, dtype=np.float32)
        text = describe(item).text if isinstance(item, SceneSpec) else str(item)
        counts, rels = parse_prompt(text)
        for key, n in counts.items():
            vec[group_index(key)] = n
        for rel in rels:
            k = (group_index(rel.subject) * N_GROUPS + group_index(rel.obj)) * len(RELATIONS)
            vec[N_GROUPS + k + RELATIONS.index(rel.relation)] = 1.0
        if layout:
            if not isinstance(item, SceneSpec):
                raise TypeError("layout conditioning needs a SceneSpec")
            if item.grid_size != self.grid_size:
                raise ValueError(f"scene grid {item.grid_size} != encoder grid {self.grid_size}")
            vec[self.global_dim - 1] = 1.0
            cells = vec[self.global_dim :].reshape(self.grid_size, self.grid_size, CELL_FEATURES)
            for o in item.objects:
                f = cells[o.cell]
                f[0] = 1.0
                f[1 + SHAPES.index(o.shape)] = 1.0
                f[1 + len(SHAPES) + COLORS.index(o.color)] = 1.0
                f[-1] = o.scale
        return vec

    def encode_batch(self, items: Sequence, layout: Union[bool, Sequence[bool]] = False) -> torch.Tensor:
        if isinstance(layout, bool):
            layout = [layout] * len(items)
        return torch.from_numpy(np.stack([self.encode(x, l) for x, l in zip(items, layout)]))

    def split(self, cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(global part, layout map ``(B, CELL_FEATURES, G, G)``)."""
        g = cond[:, : self.global_dim]
        lay = cond[:, self.global_dim :].reshape(-1, self.grid_size, self.grid_size, CELL_FEATURES)
        return g, lay.permute(0, 3, 1, 2)
