"""Evaluation rows, aggregates and image panels."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..diffusion.checkpoint import atomic_write_bytes
from ..diffusion.codec import IdentityCodec
from ..diffusion.core import sample
from ..qa import CATEGORIES, OracleQaGenerator, QaGenerator
from ..remote import png_bytes
from ..scene import SceneSpec, describe
from ..vqa import VqaBackend, evaluate


@dataclass
class MetricsReport:
    """Per-prompt rows keyed by ``model`` plus aggregates recomputed from them."""

    rows: list = field(default_factory=list)

    def add(self, model: str, prompt_id: int, prompt: str, report, stage: Optional[str] = None) -> None:
        row = {"model": model, "prompt_id": prompt_id, "prompt": prompt, "acc": report.acc,
               "per_category_acc": {k: report.per_category_acc[k] for k in CATEGORIES if k in report.per_category_acc}}
        if stage is not None:
            row["stage"] = stage
        self.rows.append(row)

    def _key(self, r) -> str:
        return r["model"] if "stage" not in r else f"{r['model']}/{r['stage']}"

    def aggregates(self) -> dict:
        out = {}
        for key in sorted({self._key(r) for r in self.rows}):
            sub = [r for r in self.rows if self._key(r) == key]
            cats = {}
            for c in CATEGORIES:
                vals = [r["per_category_acc"][c] for r in sub if c in r["per_category_acc"]]
                if vals:
                    cats[c] = float(np.mean(vals))
            out[key] = {"n": len(sub), "acc": float(np.mean([r["acc"] for r in sub])), "per_category_acc": cats}
        return out

    def deltas(self) -> dict:
        agg = self.aggregates()
        d = {}
        if "baseline" in agg and "finetuned" in agg:
            d["finetuned_minus_baseline"] = agg["finetuned"]["acc"] - agg["baseline"]["acc"]
        for key in agg:
            if key.endswith("/pre") and key[:-4] + "/post" in agg:
                d[f"{key[:-4]}_post_minus_pre"] = agg[key[:-4] + "/post"]["acc"] - agg[key]["acc"]
        return d

    def summary(self) -> dict:
        agg = self.aggregates()
        self.check(agg)
        return {"type": "summary", "aggregates": agg, "deltas": self.deltas()}

    def check(self, agg: Optional[dict] = None) -> None:
        agg = agg or self.aggregates()
        for key, a in agg.items():
            vals = [r["acc"] for r in self.rows if self._key(r) == key]
            if not math.isclose(a["acc"], sum(vals) / len(vals), rel_tol=0, abs_tol=1e-12):
                raise AssertionError(f"aggregate for {key} disagrees with its rows")

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "row", **r}, sort_keys=True) for r in self.rows]
        lines.append(json.dumps(self.summary(), sort_keys=True))
        return "\n".join(lines) + "\n"


def sample_images(model, schedule, scenes: Sequence[SceneSpec], seed: int, batch_size: int = 50) -> np.ndarray:
    """Text-conditioned samples, one per scene prompt; batch ``k`` uses seed ``seed + k``."""
    cond = model.encoder.encode_batch(scenes, False)
    shape = (3, model.config.canvas, model.config.canvas)
    parts = [sample(model, cond[i : i + batch_size], schedule, IdentityCodec(), shape, seed=seed + i // batch_size)
             for i in range(0, len(scenes), batch_size)]
    return np.concatenate(parts) if parts else np.zeros((0, model.config.canvas, model.config.canvas, 3), np.uint8)


def score_images(scenes, images, backend: VqaBackend, qa: Optional[QaGenerator] = None) -> list:
    qa = qa or OracleQaGenerator()
    return [evaluate(img, qa.generate(describe(s)), backend) for s, img in zip(scenes, images)]


def panel(images: Sequence[np.ndarray], scale: int = 2, gap: int = 2) -> np.ndarray:
    """Images side by side on a white strip, upscaled by ``scale``."""
    ims = [np.kron(im, np.ones((scale, scale, 1), dtype=np.uint8)) for im in images]
    h = max(im.shape[0] for im in ims)
    w = sum(im.shape[1] for im in ims) + gap * (len(ims) - 1)
    out = np.full((h, w, 3), 255, dtype=np.uint8)
    x = 0
    for im in ims:
        out[: im.shape[0], x : x + im.shape[1]] = im
        x += im.shape[1] + gap
    return out


def save_png(path, image: np.ndarray) -> None:
    atomic_write_bytes(path, png_bytes(image))
