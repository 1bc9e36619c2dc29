"""Harness configuration: TOML file, environment override, CLI overrides.

Example::

    work_dir = "run"              # every artifact lives under here
    seed = 0

    [backends]
    qa_generator = "oracle"       # or "remote" plus qa_generator_url
    vqa = "oracle"
    segmenter = "oracle"

    [data]
    n_scenes = 2000
    min_objects = 1
    max_objects = 3

    [pretrain]
    epochs = 60

    [finetune]
    alpha1 = 1e-4

    [eval]
    n_prompts = 200

    [edit]
    n_prompts = 20
    max_iters = 5

Relative paths resolve against the directory holding the config file.
``COMPALIGN_DATASET_ROOT`` overrides ``dataset_root``.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import tomli

from ..diffusion.train import PretrainConfig
from ..finetune import FinetuneConfig

DATASET_ENV = "COMPALIGN_DATASET_ROOT"
ROLES = ("qa_generator", "vqa", "segmenter")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_scenes: int = 2000
    min_objects: int = 1
    max_objects: int = 3
    canvas: int = 64
    grid_size: int = 4


@dataclass(frozen=True)
class EvalConfig:
    n_prompts: int = 200
    batch_size: int = 50


@dataclass(frozen=True)
class EditConfig:
    n_prompts: int = 20
    max_iters: int = 5


@dataclass(frozen=True)
class FinetuneRunConfig:
    """Fine-tuning hyperparameters plus the size of the fresh-prompt pool."""

    params: FinetuneConfig = FinetuneConfig()
    n_fresh: int = 2000


@dataclass(frozen=True)
class HarnessConfig:
    work_dir: Path = Path("run")
    dataset_root: Optional[Path] = None
    seed: int = 0
    backends: dict = field(default_factory=lambda: {r: "oracle" for r in ROLES})
    data: DataConfig = DataConfig()
    pretrain: PretrainConfig = PretrainConfig()
    finetune: FinetuneRunConfig = FinetuneRunConfig()
    eval: EvalConfig = EvalConfig()
    edit: EditConfig = EditConfig()

    def __post_init__(self):
        object.__setattr__(self, "work_dir", Path(self.work_dir))
        if self.dataset_root is None:
            object.__setattr__(self, "dataset_root", self.work_dir / "data")
        else:
            object.__setattr__(self, "dataset_root", Path(self.dataset_root))
        for role, value in self.backends.items():
            if role not in ROLES:
                raise ConfigError(f"unknown backend role {role!r}")
            if value != "oracle" and not str(value).startswith(("http://", "https://")):
                raise ConfigError(f"backend {role} must be 'oracle' or an http(s) URL, got {value!r}")
        if self.data.min_objects < 0 or self.data.max_objects < self.data.min_objects:
            raise ConfigError("need 0 <= min_objects <= max_objects")

    def backend(self, role: str) -> Optional[str]:
        v = self.backends.get(role, "oracle")
        return None if v == "oracle" else v

    def to_dict(self) -> dict:
        return {
            "work_dir": str(self.work_dir),
            "dataset_root": str(self.dataset_root),
            "seed": self.seed,
            "backends": dict(self.backends),
            "data": asdict(self.data),
            "pretrain": self.pretrain.to_dict(),
            "finetune": {**self.finetune.params.to_dict(), "n_fresh": self.finetune.n_fresh},
            "eval": asdict(self.eval),
            "edit": asdict(self.edit),
        }


def _build(cls, section: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def _backends(section: dict) -> dict:
    out = {r: "oracle" for r in ROLES}
    for role in ROLES:
        kind = section.get(role, "oracle")
        url = section.get(f"{role}_url")
        if kind == "remote":
            if not url:
                raise ConfigError(f"backend {role} is remote but {role}_url is missing")
            out[role] = url
        elif kind == "oracle":
            if url:
                raise ConfigError(f"{role}_url given but backend {role} is oracle")
        else:
            raise ConfigError(f"backend {role} must be 'oracle' or 'remote', got {kind!r}")
    extra = set(section) - set(ROLES) - {f"{r}_url" for r in ROLES}
    if extra:
        raise ConfigError(f"unknown keys in [backends]: {sorted(extra)}")
    return out


def config_from_dict(raw: dict, base_dir: Path = Path(".")) -> HarnessConfig:
    raw = dict(raw)
    known = {"work_dir", "dataset_root", "seed", "backends", "data", "pretrain", "finetune", "eval", "edit"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")

    def path(key):
        v = raw.get(key)
        return None if v is None else (base_dir / v).resolve()

    ft = dict(raw.get("finetune", {}))
    n_fresh = ft.pop("n_fresh", FinetuneRunConfig.n_fresh)
    seed = int(raw.get("seed", 0))
    ft.setdefault("seed", seed)
    pre = dict(raw.get("pretrain", {}))
    pre.setdefault("seed", seed)
    return HarnessConfig(
        work_dir=path("work_dir") or (base_dir / "run").resolve(),
        dataset_root=path("dataset_root"),
        seed=seed,
        backends=_backends(raw.get("backends", {})),
        data=_build(DataConfig, raw.get("data", {}), "data"),
        pretrain=_build(PretrainConfig, pre, "pretrain"),
        finetune=FinetuneRunConfig(_build(FinetuneConfig, ft, "finetune"), int(n_fresh)),
        eval=_build(EvalConfig, raw.get("eval", {}), "eval"),
        edit=_build(EditConfig, raw.get("edit", {}), "edit"),
    )


def _set_dotted(raw: dict, dotted: str, value) -> None:
    node = raw
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def load_config(path=None, overrides=(), env=None) -> HarnessConfig:
    """Read ``path`` (optional), apply ``key.sub=value`` overrides, then the env override."""
    env = os.environ if env is None else env
    raw: dict = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = tomli.loads(path.read_text(encoding="utf-8"))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base = path.parent
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        _set_dotted(raw, key.strip(), _parse_value(value.strip()))
    cfg = config_from_dict(raw, base)
    if env.get(DATASET_ENV):
        cfg = replace(cfg, dataset_root=Path(env[DATASET_ENV]).resolve())
    return cfg
