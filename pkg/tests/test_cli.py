import json

import numpy as np
import pytest

from memplan import buffer
from memplan.cli import main
from memplan.config import Config, ConfigError, load_config
from memplan.pipeline import run_pipeline

SMALL = """
seed = 3
collect.steps = 2000
[env]
kind = "open"
[grid]
width = 7
height = 7
[obs]
mode = "identity"
dim = 2
[q]
exact = true
[embed]
steps = 60
batch = 64
[planner]
num_vertices = 40
r = 5
[eval]
pairs_per_band = 10
bands = [2, 4]
[refine]
goals_per_round = 60
bands = [1, 2, 3, 4, 5]
[report]
pairs_per_bin = 10
max_bfs = 6
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else json.loads(err))


def test_config_tables_and_overrides(cfg_file):
    cfg = load_config(cfg_file, ["planner.r=7", "q.exact=false", "eval.bands=3,5"])
    assert cfg["grid.width"] == 7 and cfg["planner.r"] == 7 and cfg["q.exact"] is False
    assert cfg["eval.bands"] == [3, 5]
    assert cfg.hash() != load_config(cfg_file).hash()
    assert load_config(cfg_file).hash() == load_config(cfg_file).hash()


def test_config_rejects_bad_input(tmp_path):
    with pytest.raises(ConfigError):
        Config({"nope": 1})
    with pytest.raises(ConfigError):
        load_config(None, ["planner.r"])
    with pytest.raises(ConfigError):
        load_config(None, ["planner.r=ten"])
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = = 1")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_cli_workflow(cfg_file, tmp_path, capsys):
    out = tmp_path / "o"
    common = ["--config", cfg_file, "--out", out]
    code, s = _run(capsys, "collect", *common)
    assert code == 0 and s["steps"] == 2000
    log = out / "walk.plog"
    assert _run(capsys, "buffer-info", *common, "--log", log)[1]["states"] == 2001
    assert _run(capsys, "train-q", *common, "--log", log)[0] == 0
    code, s = _run(capsys, "train-embed", *common, "--log", log, "--q", out / "q.bin")
    assert code == 0 and s["c_q"] > 0
    code, s = _run(capsys, "build-roadmap", *common, "--log", log, "--embed", out / "embed.bin")
    assert code == 0 and s["edges"] > 0
    models = ["--log", log, "--q", out / "q.bin", "--embed", out / "embed.bin", "--roadmap", out / "roadmap.json"]
    code, s = _run(capsys, "plan", *common, *models[:2], *models[4:], "--start", "0,0", "--goal", "6,6")
    assert code == 0 and s["found"] and s["total_len"] >= 12
    plan = json.loads((out / "plan.json").read_text())
    assert plan["poses"][0] == [0.0, 0.0] and len(plan["actions"]) == plan["total_len"]
    code, s = _run(capsys, "per-probe", *common, *models[:2], *models[4:6], "--start", "1,1", "--goal", "2,1")
    assert code == 0 and s["found"] and s["length"] == 1
    code, s = _run(capsys, "eval", *common, *models, "--policy", "greedy-q")
    assert code == 0 and s["success"]["greedy-q"] == [1.0, 1.0]
    code, s = _run(capsys, "report", *common, *models)
    assert code == 0 and s["false_edges"] == 0 and s["step_distance_error"] < 1e-9
    code, s = _run(capsys, "refine", *common, *models)
    assert code == 0 and s["steps"] == 2000
    assert buffer.load(out / "refined.plog").total_steps == 2000
    for name in ("roadmap.svg", "plan.svg", "success.svg", "calibration.svg", "refine_rounds.csv"):
        assert (out / name).stat().st_size > 0


def test_cli_errors_are_structured(cfg_file, tmp_path, capsys):
    code, err = _run(capsys, "collect", "--set", "bogus=1", "--out", tmp_path)
    assert code == 2 and err["error"] == "ConfigError"
    code, err = _run(capsys, "buffer-info", "--log", tmp_path / "missing.plog", "--out", tmp_path)
    assert code == 2 and err["error"] == "FileNotFoundError"


def test_pipeline_is_deterministic(cfg_file, tmp_path):
    cfg = load_config(cfg_file)
    a, b = tmp_path / "a", tmp_path / "b"
    run_pipeline(cfg, a)
    run_pipeline(cfg, b)
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    assert {"walk.plog", "q.bin", "embed.bin", "report.json", "roadmap.svg"} <= set(names)
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_seed_changes_outputs(cfg_file, tmp_path):
    cfg = load_config(cfg_file)
    run_pipeline(cfg, tmp_path / "a", figures=False)
    run_pipeline(cfg.update({"seed": 4}), tmp_path / "b", figures=False)
    assert (tmp_path / "a" / "walk.plog").read_bytes() != (tmp_path / "b" / "walk.plog").read_bytes()
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["seed"] == 3 and report["roadmap"]["false_edges"] == 0
