import json
import os

import pytest

from atomicvla import cli
from atomicvla import policy as pl
from atomicvla import simworld as sw


def write(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


def test_minimal_config_defaults(tmp_path):
    cfg = cli.load_config(write(tmp_path, {"task_suite": "five_skill"}), env={})
    assert cfg["seed"] == 0 and cfg["train"]["variant"] == "sg_moe"
    assert cfg["segment"] == {"trans_thresh": 0.03, "rot_thresh": 0.05, "grip_thresh": 0.1, "window": 5, "refiner": "rule"}
    assert cfg["eval"]["flow_steps"] == 10


@pytest.mark.parametrize("raw, msg", [
    ({"task_suite": "five_skill", "learning_rte": 1e-3}, "learning_rte"),
    ({"task_suite": "five_skill", "train": {"learning_rte": 1e-3}}, "train.learning_rte"),
    ({"task_suite": "five_skill", "train": {"steps": "many"}}, "train.steps: expected int"),
    ({"task_suite": "five_skill", "eval": {"use_ema": 1}}, "eval.use_ema: expected bool"),
    ({"seed": 1}, "missing required field: task_suite"),
    ({"task_suite": "nope"}, "unknown suite"),
    ({"task_suite": "five_skill", "paths": {"episodes": "/no/such/file"}}, "paths.episodes"),
])
def test_config_errors(tmp_path, raw, msg):
    with pytest.raises(cli.ConfigError, match=msg):
        cli.load_config(write(tmp_path, raw), env={})


def test_resolved_echo_roundtrip(tmp_path):
    cfg = cli.load_config(write(tmp_path, {"task_suite": "press", "train": {"steps": 7}}), ["eval.rollouts=3"], env={})
    again = cli.load_config(write(tmp_path, cfg, "echo.json"), env={})
    assert again == cfg


def test_seed_precedence(tmp_path):
    p = write(tmp_path, {"task_suite": "five_skill", "seed": 1})
    assert cli.load_config(p, env={})["seed"] == 1
    assert cli.load_config(p, env={"ATOMICVLA_SEED": "2"})["seed"] == 2
    assert cli.load_config(p, env={"ATOMICVLA_SEED": "2"}, seed=3)["seed"] == 3
    with pytest.raises(cli.ConfigError, match="ATOMICVLA_SEED"):
        cli.load_config(p, env={"ATOMICVLA_SEED": "x"})


def test_error_record_and_partial(tmp_path, capsys):
    cfg = write(tmp_path, {"task_suite": "five_skill"})
    out = str(tmp_path / "seg")
    assert cli.run(["segment", "--config", cfg, "--out", out]) == 2
    rec = json.loads(capsys.readouterr().err)
    assert rec["status"] == "error" and "paths.episodes" in rec["message"]
    assert os.path.exists(out + ".partial/error.json") and not os.path.exists(out)


def test_smoke_pipeline(tmp_path, monkeypatch):
    monkeypatch.delenv("ATOMICVLA_SEED", raising=False)
    cfg = write(tmp_path, {"task_suite": "five_skill", "episodes_per_task": 2, "seed": 0,
                           "train": {"steps": 200, "warmup": 20, "eval_every": 100},
                           "eval": {"rollouts": 5, "max_steps": 120}})
    d = str(tmp_path)
    assert cli.run(["gen", "--config", cfg, "--out", f"{d}/gen"]) == 0
    before = open(f"{d}/gen/episodes.jsonl", "rb").read()
    assert cli.run(["segment", "--config", cfg, "--out", f"{d}/seg", "--episodes", f"{d}/gen"]) == 0
    assert open(f"{d}/gen/episodes.jsonl", "rb").read() == before
    assert cli.run(["train", "--config", cfg, "--out", f"{d}/train", "--episodes", f"{d}/seg"]) == 0
    assert cli.run(["eval", "--config", cfg, "--out", f"{d}/eval", "--checkpoint", f"{d}/train"]) == 0
    for sub in ("gen", "seg", "train", "eval"):
        prov = json.load(open(f"{d}/{sub}/provenance.json"))
        assert prov["tool"] == "atomicvla" and prov["version"]
        assert json.load(open(f"{d}/{sub}/config.json"))["task_suite"] == "five_skill"
    seg = json.load(open(f"{d}/seg/summary.json"))
    assert seg["episodes"] == len(sw.suite_specs("five_skill")) * 2
    eps = json.load(open(f"{d}/eval/episodes/eval.json"))
    assert len(eps) == 25
    # report recomputes the eval table byte-exactly from stored episodes
    assert cli.run(["report", "--config", cfg, "--out", f"{d}/rep", "--input", f"{d}/eval"]) == 0
    rep = json.load(open(f"{d}/rep/report.json"))
    assert rep["success"]["eval"] == json.load(open(f"{d}/eval/summary.json"))["success"]
    assert cli.run(["report", "--config", cfg, "--out", f"{d}/rep2", "--input", f"{d}/eval"]) == 0
    for f in ("report.json", "routing.svg"):
        assert open(f"{d}/rep/{f}", "rb").read() == open(f"{d}/rep2/{f}", "rb").read()


def test_oracle_eval_chain(tmp_path, capsys):
    cfg = write(tmp_path, {"task_suite": "five_skill", "eval": {"rollouts": 0, "chains": 4}})
    assert cli.run(["eval", "--config", cfg, "--out", str(tmp_path / "ev"), "--policy", "oracle"]) == 0
    info = json.load(open(tmp_path / "ev" / "summary.json"))
    assert info["chain"]["avg_len"] == 5.0
    rep, _ = cli.build_report(str(tmp_path / "ev"))
    assert rep["chains"]["eval"]["avg_len"] == 5.0


def three_subtask_result():
    # rows: (subtask index, expert, gate w, env steps executed)
    trace = [[0, 2, 0.97, 8]] * 3 + [[1, 0, 0.95, 8]] * 4 + [[1, 0, 0.95, 3]] + [[2, 1, 0.99, 8]] * 2
    return {"task": "object_into_drawer", "seed": 0, "steps": 75, "act_trace": trace, "think_steps": [0, 24, 59]}


def test_plot_deterministic_and_parse_back():
    res = three_subtask_result()
    a, b = cli.emit_plot(res), cli.emit_plot(json.loads(json.dumps(res)))
    assert a == b
    ks, thinks = cli.parse_plot(a)
    assert thinks == 3 and ks == [2, 0, 1]
    assert cli.route_bands(res) == [(0, 24, 2), (24, 59, 0), (59, 75, 1)]


def test_plot_scripted_episode_has_no_bands():
    pol = pl.Policy(bundle=None, planner="oracle", mode="oracle", actor="scripted")
    res, _ = pl.run_episode(pol, sw.TASKS["object_into_drawer"], 0, pl.Limits())
    ks, thinks = cli.parse_plot(cli.emit_plot(res.to_json()))
    assert ks == [-1] and thinks == len(res.think_steps)


def test_plot_empty_trace():
    svg = cli.emit_plot({})
    assert b"no routing" in svg and cli.parse_plot(svg) == ([-1], 0)
