"""On-disk dataset and artifact helpers.

Dataset layout under ``dataset_root``::

    scenes.jsonl     first line is a header object, then one record per scene
    images/NNNNN.png one render per record

Every other artifact is written atomically and named by a content hash of
whatever determined it, so reruns never overwrite an earlier stage.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..diffusion.checkpoint import atomic_write_bytes
from ..errors import MissingArtifactError
from ..remote import png_bytes, read_png
from ..scene import SceneSpec, describe, render, sample_scene

DATASET_FORMAT = "compalign-scenes"
DATASET_VERSION = 1
HELD_OUT_OFFSET = 1 << 30
FRESH_OFFSET = 1 << 29


def digest(obj) -> str:
    data = obj if isinstance(obj, bytes) else json.dumps(obj, sort_keys=True).encode("utf-8")
    return hashlib.sha256(data).hexdigest()[:16]


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_jsonl(path, rows: Iterable[dict]) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path)
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def scene_stream(seed: int, n: int, min_objects: int, max_objects: int, offset: int = 0, canvas: int = 64,
                 grid_size: int = 4) -> list[SceneSpec]:
    """Deterministic scene list; ``offset`` separates training, fresh and held-out streams."""
    rng = np.random.default_rng([seed, offset])
    counts = rng.integers(min_objects, max_objects + 1, size=n)
    base = (seed * 1_000_003 + offset) % (1 << 62)
    return [sample_scene(base + i, int(k), canvas, grid_size) for i, k in enumerate(counts)]


def write_dataset(root, scenes: Sequence[SceneSpec], meta: dict) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows = [{"format": DATASET_FORMAT, "version": DATASET_VERSION, "n": len(scenes), **meta}]
    for i, s in enumerate(scenes):
        rel = f"images/{i:05d}.png"
        data = png_bytes(render(s))
        atomic_write_bytes(root / rel, data)
        rows.append({"index": i, "prompt": describe(s).text, "scene": s.to_dict(), "image": rel,
                     "sha256": hashlib.sha256(data).hexdigest()})
    out = root / "scenes.jsonl"
    write_jsonl(out, rows)
    return out


def read_dataset(root, load_images: bool = True) -> tuple[dict, list[tuple[SceneSpec, np.ndarray]]]:
    root = Path(root)
    rows = read_jsonl(root / "scenes.jsonl")
    if not rows or rows[0].get("format") != DATASET_FORMAT:
        raise ValueError(f"{root / 'scenes.jsonl'} is not a scene dataset")
    header, records = rows[0], rows[1:]
    out = []
    for r in records:
        scene = SceneSpec.from_dict(r["scene"])
        img = None
        if load_images:
            p = root / r["image"]
            if not p.is_file():
                raise MissingArtifactError(p)
            img = read_png(p.read_bytes())
        out.append((scene, img))
    return header, out


def dataset_digest(root) -> str:
    p = Path(root) / "scenes.jsonl"
    if not p.is_file():
        raise MissingArtifactError(p)
    return digest(p.read_bytes())
