"""Checkpoint container.

Layout::

    b"CMPACKPT"            8-byte magic
    u32 little-endian     header length N
    N bytes               UTF-8 JSON header
    float32 LE payload    arrays back to back

The header holds ``version``, ``schedule`` (betas), ``model`` (denoiser
config), free-form ``meta`` and ``arrays``: a list of
``{"name", "shape", "offset", "count"}`` with offsets in elements from the
start of the payload.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ..errors import MissingArtifactError
from .model import Denoiser, DenoiserConfig
from .schedule import NoiseSchedule

MAGIC = b"CMPACKPT"
VERSION = 1


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def encode_checkpoint(state: dict, schedule: NoiseSchedule, config: DenoiserConfig, meta: Optional[dict] = None) -> bytes:
    arrays, chunks, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        arrays.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.size
    header = {
        "version": VERSION,
        "schedule": schedule.to_dict(),
        "model": config.to_dict(),
        "meta": meta or {},
        "arrays": arrays,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(chunks)


def decode_checkpoint(data: bytes) -> tuple[dict, dict]:
    """Returns (header, name -> float32 tensor)."""
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(data[start : start + n].decode("utf-8"))
    if header.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    payload = np.frombuffer(data, dtype="<f4", offset=start + n)
    tensors = {}
    for a in header["arrays"]:
        chunk = payload[a["offset"] : a["offset"] + a["count"]]
        if chunk.size != a["count"]:
            raise ValueError(f"truncated array {a['name']}")
        tensors[a["name"]] = torch.from_numpy(chunk.astype(np.float32).reshape(a["shape"]))
    return header, tensors


def save_checkpoint(path, model: Denoiser, schedule: NoiseSchedule, meta: Optional[dict] = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(model.state_dict(), schedule, model.config, meta))


def load_checkpoint(path) -> tuple[Denoiser, NoiseSchedule, dict]:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path)
    header, tensors = decode_checkpoint(path.read_bytes())
    schedule = NoiseSchedule.from_dict(header["schedule"])
    model = Denoiser(DenoiserConfig(**header["model"]), schedule.alpha_bars)
    model.load_state_dict(tensors)
    model.eval()
    return model, schedule, header["meta"]
