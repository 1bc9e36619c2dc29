"""``compalign`` command line: data generation, training, evaluation, editing.

Exit codes: 0 success, 1 usage/config error, 2 missing artifact, 3 backend failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

from ..diffusion.checkpoint import load_checkpoint, save_checkpoint
from ..diffusion.train import pretrain
from ..editor import correction_loop, make_segmenter
from ..errors import BackendError, MissingArtifactError, ProtocolError
from ..finetune import run_finetune
from ..perception import oracle_parse
from ..qa import make_qa_generator
from ..scene import describe
from ..vqa import make_vqa_backend
from .config import ConfigError, HarnessConfig, load_config
from .report import MetricsReport, panel, sample_images, save_png, score_images
from .store import (
    FRESH_OFFSET,
    HELD_OUT_OFFSET,
    dataset_digest,
    digest,
    read_dataset,
    read_jsonl,
    scene_stream,
    write_dataset,
    write_jsonl,
)

log = logging.getLogger("compalign")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_BACKEND = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# artifact naming


def _file_digest(path: Path) -> str:
    if not path.is_file():
        raise MissingArtifactError(path)
    return digest(path.read_bytes())


def pretrain_path(cfg: HarnessConfig) -> Path:
    key = digest({"dataset": dataset_digest(cfg.dataset_root), "pretrain": cfg.pretrain.to_dict()})
    return cfg.work_dir / "checkpoints" / f"pretrain-{key}.ckpt"


def finetune_path(cfg: HarnessConfig, base: Optional[Path] = None) -> Path:
    base = base or pretrain_path(cfg)
    key = digest({"base": base.name, "finetune": cfg.to_dict()["finetune"], "backends": cfg.backends,
                  "data": cfg.to_dict()["data"]})
    return cfg.work_dir / "checkpoints" / f"finetune-{key}.ckpt"


def held_out(cfg: HarnessConfig, n: int):
    d = cfg.data
    return scene_stream(cfg.seed, n, max(d.min_objects, 1), d.max_objects, HELD_OUT_OFFSET, d.canvas, d.grid_size)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: HarnessConfig, n_scenes: Optional[int] = None, max_objects: Optional[int] = None,
                 verify: bool = False) -> Path:
    d = cfg.data
    n = d.n_scenes if n_scenes is None else n_scenes
    hi = d.max_objects if max_objects is None else max_objects
    lo = min(d.min_objects, hi)
    meta = {"seed": cfg.seed, "min_objects": lo, "max_objects": hi, "canvas": d.canvas, "grid_size": d.grid_size}
    out = Path(cfg.dataset_root) / "scenes.jsonl"
    if out.is_file():
        header = read_jsonl(out)[0]
        if header.get("n") == n and all(header.get(k) == v for k, v in meta.items()):
            log.info("dataset already present at %s", out)
            return out
        raise UsageError(f"{out} holds a different dataset; choose another dataset_root")
    scenes = scene_stream(cfg.seed, n, lo, hi, 0, d.canvas, d.grid_size)
    path = write_dataset(cfg.dataset_root, scenes, meta)
    if verify:
        _, pairs = read_dataset(cfg.dataset_root)
        for s, img in pairs:
            parsed = oracle_parse(img, s.grid_size)
            got = sorted((o.cell, o.color, o.shape) for o in parsed.objects)
            want = sorted((o.cell, o.color, o.shape) for o in s.objects)
            if got != want or parsed.unknown_regions:
                raise RuntimeError(f"round-trip check failed for seed {s.seed}")
    log.info("wrote %d scenes to %s", n, path)
    return path


def cmd_pretrain(cfg: HarnessConfig) -> Path:
    out = pretrain_path(cfg)
    if out.is_file():
        log.info("pretrained checkpoint already present: %s", out)
        return out
    _, data = read_dataset(cfg.dataset_root)
    pc = replace(cfg.pretrain, checkpoint_dir=str(out.parent / (out.stem + ".partial"))) if cfg.pretrain.checkpoint_every else cfg.pretrain
    res = pretrain(data, pc)
    save_checkpoint(out, res.model, res.schedule,
                    {"stage": "pretrain", "epoch_losses": res.epoch_losses, "initial_loss": res.initial_loss})
    log.info("wrote %s", out)
    return out


def cmd_finetune(cfg: HarnessConfig, checkpoint: Optional[Path] = None) -> Path:
    base = Path(checkpoint) if checkpoint else pretrain_path(cfg)
    out = finetune_path(cfg, base)
    if out.is_file():
        log.info("fine-tuned checkpoint already present: %s", out)
        return out
    model, schedule, _ = load_checkpoint(base)
    _, data = read_dataset(cfg.dataset_root)
    d = cfg.data
    fresh = scene_stream(cfg.seed, cfg.finetune.n_fresh, max(d.min_objects, 1), d.max_objects, FRESH_OFFSET,
                         d.canvas, d.grid_size)
    params = cfg.finetune.params
    if params.checkpoint_every:
        params = replace(params, checkpoint_dir=str(out.parent / (out.stem + ".partial")))
    model, trace = run_finetune(model, schedule, data, fresh, params,
                                backend=make_vqa_backend(cfg.backend("vqa"), d.grid_size),
                                qa_generator=make_qa_generator(cfg.backend("qa_generator")),
                                trace_path=cfg.work_dir / "traces" / f"{out.stem}.jsonl")
    save_checkpoint(out, model, schedule, {"stage": "finetune", "base": base.name, "iterations": len(trace)})
    log.info("wrote %s", out)
    return out


def cmd_eval(cfg: HarnessConfig, checkpoint: Optional[Path] = None, baseline: Optional[Path] = None,
             n_prompts: Optional[int] = None) -> tuple[Path, MetricsReport]:
    """Score samples on held-out prompts; compares two checkpoints when both exist."""
    n = cfg.eval.n_prompts if n_prompts is None else n_prompts
    models = {}
    if checkpoint is None and baseline is None:
        baseline = pretrain_path(cfg)
        ft = finetune_path(cfg, baseline)
        checkpoint = ft if ft.is_file() else None
    if baseline is not None:
        models["baseline"] = Path(baseline)
    if checkpoint is not None:
        models["finetuned"] = Path(checkpoint)
    for p in models.values():
        if not p.is_file():
            raise MissingArtifactError(p)
    scenes = held_out(cfg, n)
    backend = make_vqa_backend(cfg.backend("vqa"), cfg.data.grid_size)
    qa = make_qa_generator(cfg.backend("qa_generator"))
    report = MetricsReport()
    for name, path in models.items():
        model, schedule, _ = load_checkpoint(path)
        images = sample_images(model, schedule, scenes, cfg.seed, cfg.eval.batch_size)
        for i, (s, r) in enumerate(zip(scenes, score_images(scenes, images, backend, qa))):
            report.add(name, i, describe(s).text, r)
    key = digest({k: _file_digest(p) for k, p in models.items()} | {"n": n, "seed": cfg.seed,
                                                                     "backends": cfg.backends})
    out = cfg.work_dir / "reports" / f"eval-{key}.jsonl"
    write_jsonl(out, [json.loads(line) for line in report.to_jsonl().splitlines()])
    log.info("eval summary: %s", json.dumps(report.summary()["aggregates"]))
    return out, report


def cmd_edit(cfg: HarnessConfig, checkpoint: Optional[Path] = None, n_prompts: Optional[int] = None,
             max_iters: Optional[int] = None) -> tuple[Path, MetricsReport]:
    """Sample held-out prompts, run the correction loop, report pre/post accuracy."""
    n = cfg.edit.n_prompts if n_prompts is None else n_prompts
    iters = cfg.edit.max_iters if max_iters is None else max_iters
    if checkpoint is None:
        ft = finetune_path(cfg)
        checkpoint = ft if ft.is_file() else pretrain_path(cfg)
    checkpoint = Path(checkpoint)
    model, schedule, _ = load_checkpoint(checkpoint)
    scenes = held_out(cfg, n)
    backend = make_vqa_backend(cfg.backend("vqa"), cfg.data.grid_size)
    qa = make_qa_generator(cfg.backend("qa_generator"))
    seg = make_segmenter(cfg.backend("segmenter"), cfg.data.grid_size)
    images = sample_images(model, schedule, scenes, cfg.seed + 7, cfg.eval.batch_size)
    key = digest({"ckpt": _file_digest(checkpoint), "n": n, "iters": iters, "seed": cfg.seed,
                  "backends": cfg.backends})
    out_dir = cfg.work_dir / "reports" / f"edit-{key}"
    report = MetricsReport()
    loops = []
    for i, (s, img) in enumerate(zip(scenes, images)):
        prompt = describe(s)
        pairs = qa.generate(prompt)
        pre = score_images([s], [img], backend, qa)[0]
        fixed, rep = correction_loop(s, img, model, schedule, backend, seg, qa, iters, seed=cfg.seed * 10007 + i)
        post = score_images([s], [fixed], backend, qa)[0]
        report.add("edit", i, prompt.text, pre, stage="pre")
        report.add("edit", i, prompt.text, post, stage="post")
        loops.append({"prompt_id": i, "prompt": prompt.text, "n_questions": len(pairs), **rep.to_dict()})
        save_png(out_dir / f"panel_{i:04d}.png", panel([img, fixed]))
    write_jsonl(out_dir / "corrections.jsonl", loops)
    out = cfg.work_dir / "reports" / f"edit-{key}.jsonl"
    write_jsonl(out, [json.loads(line) for line in report.to_jsonl().splitlines()])
    log.info("edit deltas: %s", json.dumps(report.deltas()))
    return out, report


def cmd_pipeline(cfg: HarnessConfig) -> dict:
    cmd_gen_data(cfg)
    base = cmd_pretrain(cfg)
    ft = cmd_finetune(cfg, base)
    eval_path, _ = cmd_eval(cfg, ft, base)
    edit_path, _ = cmd_edit(cfg, ft)
    summary = {"pretrain": str(base), "finetune": str(ft), "eval_report": str(eval_path), "edit_report": str(edit_path)}
    # locations are left out of the key so relocated runs produce identical reports
    key = digest({k: v for k, v in cfg.to_dict().items() if k not in ("work_dir", "dataset_root")})
    write_jsonl(cfg.work_dir / "reports" / f"pipeline-{key}.jsonl",
                [{"stage": k, "artifact": Path(v).name} for k, v in summary.items()])
    return summary


def cmd_serve_stub(host: str, port: int) -> None:
    from .stub import StubHTTPServer

    httpd = StubHTTPServer((host, port))
    print(f"stub backends listening on {httpd.url} (routes /qa /vqa /segment)", flush=True)
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.server_close()


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="compalign", description=__doc__.splitlines()[0])
    p.add_argument("--config", "-c", type=Path, help="TOML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set pretrain.epochs=5")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a scene dataset")
    g.add_argument("--n-scenes", type=int)
    g.add_argument("--max-objects", type=int)
    g.add_argument("--verify", action="store_true", help="round-trip every render through the parser")

    sub.add_parser("pretrain", help="train the denoiser on the dataset")
    f = sub.add_parser("finetune", help="accuracy-weighted fine-tuning")
    f.add_argument("--checkpoint", type=Path)

    e = sub.add_parser("eval", help="score samples on held-out prompts")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--baseline", type=Path)
    e.add_argument("--n-prompts", type=int)

    ed = sub.add_parser("edit", help="run the correction loop on fresh samples")
    ed.add_argument("--checkpoint", type=Path)
    ed.add_argument("--n-prompts", type=int)
    ed.add_argument("--max-iters", type=int)

    sub.add_parser("pipeline", help="gen-data, pretrain, finetune, eval and edit in one go")
    s = sub.add_parser("serve-stub", help="serve oracle backends over HTTP")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8765)
    return p


def run(args) -> object:
    if args.command == "serve-stub":
        return cmd_serve_stub(args.host, args.port)
    cfg = load_config(args.config, args.overrides)
    if args.command == "gen-data":
        return cmd_gen_data(cfg, args.n_scenes, args.max_objects, args.verify)
    if args.command == "pretrain":
        return cmd_pretrain(cfg)
    if args.command == "finetune":
        return cmd_finetune(cfg, args.checkpoint)
    if args.command == "eval":
        return cmd_eval(cfg, args.checkpoint, args.baseline, args.n_prompts)[0]
    if args.command == "edit":
        return cmd_edit(cfg, args.checkpoint, args.n_prompts, args.max_iters)[0]
    if args.command == "pipeline":
        return cmd_pipeline(cfg)
    raise UsageError(f"unknown command {args.command}")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (BackendError, ProtocolError) as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    if result is not None:
        print(json.dumps(result, default=str) if isinstance(result, dict) else result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
