import json
from pathlib import Path

import numpy as np
import pytest

from compalign.harness.cli import EXIT_BACKEND, EXIT_MISSING, EXIT_USAGE, cmd_gen_data, main
from compalign.harness.config import DATASET_ENV, ConfigError, load_config
from compalign.harness.store import read_dataset, read_jsonl, scene_stream
from compalign.scene import describe, render


def write_config(tmp_path, text=""):
    p = tmp_path / "run.toml"
    p.write_text('work_dir = "w"\n' + text)
    return p


# -- config ---------------------------------------------------------------------


def test_defaults():
    cfg = load_config(env={})
    assert cfg.data.n_scenes == 2000 and cfg.pretrain.epochs == 60
    assert cfg.finetune.params.alpha1 == 1e-5 and cfg.finetune.params.t_range == (1, 10)
    assert cfg.backend("vqa") is None
    assert cfg.dataset_root == cfg.work_dir / "data"


def test_file_then_overrides_then_env(tmp_path):
    p = write_config(tmp_path, "seed = 3\n[data]\nn_scenes = 10\n[finetune]\nalpha1 = 1e-4\nt_range = [2, 4]\n")
    cfg = load_config(p, ["data.n_scenes=20", "eval.n_prompts=7"], env={})
    assert cfg.work_dir == (tmp_path / "w").resolve()
    assert cfg.seed == 3 and cfg.pretrain.seed == 3 and cfg.finetune.params.seed == 3
    assert cfg.data.n_scenes == 20 and cfg.eval.n_prompts == 7
    assert cfg.finetune.params.t_range == (2, 4)
    cfg = load_config(p, env={DATASET_ENV: str(tmp_path / "elsewhere")})
    assert cfg.dataset_root == (tmp_path / "elsewhere").resolve()


def test_remote_backend_config():
    cfg = load_config(overrides=['backends.vqa="remote"', 'backends.vqa_url="http://127.0.0.1:9/vqa"'], env={})
    assert cfg.backend("vqa") == "http://127.0.0.1:9/vqa"
    with pytest.raises(ConfigError):
        load_config(overrides=['backends.vqa="remote"'], env={})
    with pytest.raises(ConfigError):
        load_config(overrides=['backends.vqa="magic"'], env={})


@pytest.mark.parametrize("bad", ["nonsense=1", "data.bogus=1", "data.max_objects=-1", "finetune.t_range=[0, 2]",
                                 "novalue"])
def test_bad_config(bad):
    with pytest.raises(ConfigError):
        load_config(overrides=[bad], env={})


# -- gen-data -------------------------------------------------------------------


def test_gen_data_deterministic(tmp_path, monkeypatch):
    monkeypatch.delenv(DATASET_ENV, raising=False)
    roots = []
    for name in ("a", "b"):
        cfg = load_config(overrides=[f'work_dir="{tmp_path / name}"', "data.n_scenes=6"], env={})
        cmd_gen_data(cfg, verify=True)
        roots.append(cfg.dataset_root)
    a, b = [(r / "scenes.jsonl").read_bytes() for r in roots]
    assert a == b
    header, pairs = read_dataset(roots[0])
    assert header["n"] == 6 and len(pairs) == 6
    for (s, img), row in zip(pairs, read_jsonl(roots[0] / "scenes.jsonl")[1:]):
        assert np.array_equal(img, render(s)) and row["prompt"] == describe(s).text
    # streams are disjoint by construction
    assert set(s.seed for s, _ in pairs).isdisjoint(s.seed for s in scene_stream(0, 6, 1, 3, 1 << 30))


def test_gen_data_empty_has_header_only(tmp_path):
    cfg = load_config(overrides=[f'work_dir="{tmp_path}"'], env={})
    out = cmd_gen_data(cfg, n_scenes=0)
    rows = read_jsonl(out)
    assert len(rows) == 1 and rows[0]["n"] == 0


def test_gen_data_is_idempotent_and_refuses_mismatch(tmp_path):
    args = ["--set", f'work_dir="{tmp_path}"', "gen-data", "--n-scenes", "3"]
    assert main(args) == 0
    before = (tmp_path / "data" / "scenes.jsonl").stat().st_mtime_ns
    assert main(args) == 0
    assert (tmp_path / "data" / "scenes.jsonl").stat().st_mtime_ns == before
    assert main(args[:-1] + ["4"]) == EXIT_USAGE


# -- exit codes -----------------------------------------------------------------


def test_usage_errors(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["gen-data", "--n-scenes", "many"]) == EXIT_USAGE
    assert main(["--help"]) == 0
    assert main(["--config", "/nonexistent.toml", "gen-data"]) == EXIT_USAGE


def test_missing_artifacts(tmp_path):
    base = ["--set", f'work_dir="{tmp_path}"']
    assert main(base + ["pretrain"]) == EXIT_MISSING
    assert main(base + ["eval", "--checkpoint", str(tmp_path / "none.ckpt")]) == EXIT_MISSING
    assert main(base + ["finetune", "--checkpoint", str(tmp_path / "none.ckpt")]) == EXIT_MISSING


def test_backend_failure_exit_code(tmp_path):
    from compalign.harness.stub import StubServer

    with StubServer() as stub:
        base = ["--set", f'work_dir="{tmp_path}"', "--set", 'backends.qa_generator="remote"',
                "--set", f'backends.qa_generator_url="{stub.url}/error/qa"', "--set", "data.n_scenes=2",
                "--set", "pretrain.epochs=0", "--set", "pretrain.channels=8", "--set", "eval.n_prompts=1"]
        assert main(base + ["gen-data"]) == 0
        assert main(base + ["pretrain"]) == 0
        assert main(base + ["eval"]) == EXIT_BACKEND


def test_tiny_pipeline_writes_reports(tmp_path, capsys):
    base = ["--set", f'work_dir="{tmp_path}"', "--set", "data.n_scenes=4", "--set", "pretrain.epochs=1",
            "--set", "pretrain.channels=8", "--set", "pretrain.T=25", "--set", "finetune.max_iterations=1",
            "--set", "finetune.batch_size=2", "--set", "finetune.n_fresh=2", "--set", "eval.n_prompts=2",
            "--set", "edit.n_prompts=1", "--set", "edit.max_iters=1"]
    assert main(base + ["pipeline"]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert isinstance(summary, dict)
    reports = sorted(Path(tmp_path, "reports").glob("*.jsonl"))
    names = [p.name.split("-")[0] for p in reports]
    assert {"eval", "edit", "pipeline"} <= set(names)
    for p in reports:
        rows = read_jsonl(p)
        assert rows
    # rerunning reuses every artifact
    ckpts = sorted(Path(tmp_path, "checkpoints").iterdir())
    mtimes = [c.stat().st_mtime_ns for c in ckpts]
    assert main(base + ["pipeline"]) == 0
    assert [c.stat().st_mtime_ns for c in ckpts] == mtimes
