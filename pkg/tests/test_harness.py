import json
import subprocess
import sys

import numpy as np
import pytest

from mdiff import cli
from mdiff import envs
from mdiff import harness as hx

TINY = [
    "n_train=4", "n_test=2", "n_random=2", "ctx_epochs=2", "ctx_hidden=16", "d_z=4", "bank_size=2",
    "warm_n_traj=2", "warm_m=4", "K=5", "diff_steps=20", "diff_batch=8", "diff_hidden=16",
    "episodes_per_task=1", "eval_seeds=0,1",
]


def run(*args, sets=TINY):
    argv = list(args)
    for s in sets:
        argv += ["--set", s]
    return cli.main(argv)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", str(out)) == 0
    assert run("train", "--out", str(out)) == 0
    return out


def test_gen_data_layout(pipeline):
    for f in ("data/meta.json", "data/tasks.json", "data/config.json"):
        assert (pipeline / f).exists()
    doc = json.loads((pipeline / "data/config.json").read_text())
    assert doc["config"]["n_train"] == 4 and "build" in doc
    assert len(envs.load_tasks(pipeline / "data/tasks.json")) == 6


def test_train_layout(pipeline):
    for f in ("ckpt/context/context.json", "ckpt/diffusion/diffusion.json", "ckpt/manifest.json",
              "ckpt/context_losses.csv", "ckpt/diffusion_losses.csv"):
        assert (pipeline / f).exists()
    lines = (pipeline / "ckpt/diffusion_losses.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 21


def test_eval_report_and_determinism(pipeline):
    assert run("eval", "--out", str(pipeline), "--quality", "expert", "--quality", "random") == 0
    first = (pipeline / "eval/report.json").read_bytes()
    doc = json.loads(first)
    assert set(doc["qualities"]) == {"expert", "random"}
    s = doc["qualities"]["expert"]["summary"]
    assert s["n_episodes"] == 2 * 2 and len(s["seed_means"]) == 2
    assert run("eval", "--out", str(pipeline), "--quality", "expert", "--quality", "random") == 0
    assert (pipeline / "eval/report.json").read_bytes() == first
    assert (pipeline / "eval/report.csv").read_text().startswith("quality,task_id,")


def test_resume_matches_uninterrupted(pipeline, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run("gen-data", "--out", str(d)) == 0
    assert run("train", "--out", str(a)) == 0
    assert run("train", "--out", str(b), "--stop-at", "7") == 0
    assert len((b / "ckpt/diffusion_losses.csv").read_text().splitlines()) == 8
    assert run("train", "--out", str(b), "--resume") == 0
    assert (a / "ckpt/diffusion_losses.csv").read_text() == (b / "ckpt/diffusion_losses.csv").read_text()
    assert (a / "ckpt/diffusion/noise.bin").read_bytes() == (b / "ckpt/diffusion/noise.bin").read_bytes()


def test_ablate_test_time_grid(pipeline):
    assert run("ablate", "--out", str(pipeline), "--grid", "omega=1.0,2.0", "--jobs", "1") == 0
    lines = (pipeline / "ablate/table.csv").read_text().splitlines()
    assert lines[0].startswith("cell,omega,mean_return") and len(lines) == 3
    assert all(line.endswith(",ok") for line in lines[1:])


def test_ablate_marks_failed_cells(pipeline, tmp_path):
    out = tmp_path / "abl"
    rows = hx.ablate(hx.ExperimentConfig().override(**dict(hx_set(TINY))), {"H": [4, 999]},
                     pipeline / "ckpt", pipeline / "data", out, jobs=1)
    assert rows[0]["status"] == "ok"
    assert rows[1]["status"].startswith("failed") and rows[1]["mean_return"] is None


def hx_set(items):
    cfg = hx.ExperimentConfig()
    for item in items:
        k, v = item.split("=", 1)
        yield k, hx.coerce(cfg, k, v)


def test_report_renders_markdown(pipeline, tmp_path):
    md = tmp_path / "r.md"
    assert run("report", "--out", str(pipeline), "-o", str(md)) == 0
    text = md.read_text()
    assert "| quality | task_id |" in text
    assert "_losses.csv" not in text


def test_output_root_precedence(tmp_path, monkeypatch):
    env_root, flag_root = tmp_path / "env", tmp_path / "flag"
    monkeypatch.setenv("MDIFF_OUT", str(env_root))
    assert run("gen-data") == 0
    assert (env_root / "data/meta.json").exists()
    assert run("gen-data", "--out", str(flag_root)) == 0
    assert (flag_root / "data/meta.json").exists()


@pytest.mark.parametrize("argv", [
    ["gen-data", "--family", "no_such_env"],
    ["gen-data", "--set", "no_such_key=1"],
    ["gen-data", "--set", "n_train=abc"],
    ["gen-data", "--set", "n_train"],
    ["ablate", "--grid", "omega="],
    ["gen-data", "--set", "drop_prob=3"],
])
def test_usage_errors_exit_2(argv, tmp_path):
    assert run(*argv, "--out", str(tmp_path), sets=[]) == 2


def test_unknown_command_exit_2():
    assert cli.main(["frobnicate"]) == 2


def test_missing_inputs_exit_2(tmp_path):
    assert run("train", "--out", str(tmp_path / "empty")) == 2
    assert run("eval", "--out", str(tmp_path / "empty")) == 2
    assert run("ablate", "--out", str(tmp_path / "empty"), "--grid", "omega=1") == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["gen-data", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"n_train": 3, "bogus": 1}))
    assert cli.main(["gen-data", "--config", str(bad)]) == 2


def test_config_file_round_trip(tmp_path):
    cfg = hx.ExperimentConfig(n_train=7, omega=1.2, eval_seeds=[3])
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_json()))
    assert hx.ExperimentConfig.from_json(json.loads(path.read_text())) == cfg
    assert run("gen-data", "--config", str(path), "--out", str(tmp_path / "o"), sets=["n_random=1", "n_test=1"]) == 0
    saved = json.loads((tmp_path / "o/data/config.json").read_text())["config"]
    assert saved["n_train"] == 7 and saved["n_random"] == 1 and saved["omega"] == 1.2


def test_divergence_exits_3(tmp_path):
    out = str(tmp_path)
    assert run("gen-data", "--out", out) == 0
    assert run("train", "--out", out, sets=TINY + ["ctx_lr=1e30"]) == 3


def test_coerce_types():
    cfg = hx.ExperimentConfig()
    assert hx.coerce(cfg, "clip_denoised", "false") is False
    assert hx.coerce(cfg, "eval_seeds", "1,2") == [1, 2]
    assert hx.coerce(cfg, "bank_qualities", "expert,random") == ["expert", "random"]
    assert hx.coerce(cfg, "omega", "2") == 2.0
    with pytest.raises(envs.ConfigError):
        hx.coerce(cfg, "clip_denoised", "maybe")


def test_expand_grid():
    assert hx.expand_grid({"a": [1, 2], "b": ["x"]}) == [{"a": 1, "b": "x"}, {"a": 2, "b": "x"}]
    with pytest.raises(envs.ConfigError):
        hx.expand_grid({})
    with pytest.raises(envs.ConfigError):
        hx.expand_grid({"a": []})


def test_validate_rejects_bad_values():
    for kv in ({"H": 0}, {"drop_prob": 1.5}, {"schedule": "sigmoid"}, {"warm_qualities": ["great"]},
               {"eval_seeds": []}, {"temperature": 2.0}, {"n_expert": 0}):
        with pytest.raises(envs.ConfigError):
            hx.ExperimentConfig().override(**kv).validate()


def test_combine_pools_seeds():
    from mdiff import planner as pl

    rows = lambda rets: [pl.TaskRow(0, [0.1, 0.2], float(np.mean(rets)), float(np.std(rets)), 0.5, -2.0, rets)]
    doc = hx.combine([pl.EvalReport(rows([-2.0, -4.0]), {}, {}), pl.EvalReport(rows([-3.0]), {}, {})])
    s = doc["summary"]
    assert s["n_episodes"] == 3 and s["mean_return"] == pytest.approx(-3.0)
    assert s["seed_means"] == [-3.0, -3.0]
    assert s["relative_gap"] == pytest.approx(0.5)


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mdiff.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
