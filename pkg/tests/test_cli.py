import json
import os

import pytest

from tinyqat.cli import main
from tinyqat.harness import ExperimentConfig


def tiny_config_doc():
    return {
        "seed": 5,
        "epochs": 1,
        "batch_size": 16,
        "model": {"layers": 1, "heads": 1, "dim": 8, "ffn_ratio": 2,
                  "vocab": 16, "classes": 2, "seq_len": 8},
        "data": {"vocab": 16, "seq_len": 8, "classes": 2, "motif_len": 3,
                 "train_size": 32, "eval_size": 16},
        "quant": {"global_bits": 3},
        "kd": {"mode": "none", "hard_label_fallback": True},
    }


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_config_doc()))
    return str(path)


def test_missing_config_exits_1(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "run")])
    assert code == 1
    assert "not found" in capsys.readouterr().err


def test_unknown_flag_exits_1(capsys):
    assert main(["--bogus"]) == 1
    assert main(["train", "--config", "x", "--frobnicate"]) == 1


def test_invalid_config_json_exits_1(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{broken")
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 1


def test_unknown_config_key_exits_1(tmp_path, capsys):
    doc = tiny_config_doc()
    doc["bogus_section"] = {}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 1


def test_gen_data_writes_datasets(config_path, tmp_path, capsys):
    out = str(tmp_path / "data")
    assert main(["gen-data", "--config", config_path, "--out", out]) == 0
    assert os.path.exists(os.path.join(out, "train.jsonl"))
    assert os.path.exists(os.path.join(out, "eval.jsonl"))
    assert sum(1 for _ in open(os.path.join(out, "train.jsonl"))) == 32


def test_train_prints_metrics_and_exits_0(config_path, tmp_path, capsys):
    out = str(tmp_path / "run")
    assert main(["train", "--config", config_path, "--out", out]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert "top1" in printed
    with open(os.path.join(out, "metrics.json")) as f:
        assert json.load(f) == printed


def test_seed_override_changes_run(config_path, tmp_path, capsys):
    out1, out2 = str(tmp_path / "r1"), str(tmp_path / "r2")
    assert main(["train", "--config", config_path, "--out", out1]) == 0
    assert main(["train", "--config", config_path, "--out", out2,
                 "--seed", "99"]) == 0
    cfg2 = json.load(open(os.path.join(out2, "config.json")))
    assert cfg2["seed"] == 99


def test_full_cli_pipeline(config_path, tmp_path, capsys):
    teacher_dir = str(tmp_path / "teacher")
    assert main(["train-teacher", "--config", config_path,
                 "--out", teacher_dir]) == 0
    cache_path = str(tmp_path / "cache.jsonl")
    assert main(["build-cache", "--config", config_path,
                 "--teacher", os.path.join(teacher_dir, "model"),
                 "--out", cache_path, "--crops", "2"]) == 0
    assert sum(1 for _ in open(cache_path)) == 32 * 2

    doc = tiny_config_doc()
    doc["kd"] = {"mode": "multi-crop", "crops": 2, "cache_path": cache_path}
    doc["init_checkpoint"] = os.path.join(teacher_dir, "model")
    student_path = tmp_path / "student.json"
    student_path.write_text(json.dumps(doc))
    student_dir = str(tmp_path / "student")
    assert main(["train", "--config", str(student_path),
                 "--out", student_dir]) == 0

    capsys.readouterr()
    assert main(["report", str(tmp_path)]) == 0
    report = capsys.readouterr().out
    assert report.splitlines()[0].split("\t")[0] == "run"
    assert "student" in report and "teacher" in report


def test_cache_miss_aborts_with_exit_2(config_path, tmp_path, capsys):
    teacher_dir = str(tmp_path / "teacher")
    main(["train-teacher", "--config", config_path, "--out", teacher_dir])
    cache_path = str(tmp_path / "cache.jsonl")
    main(["build-cache", "--config", config_path,
          "--teacher", os.path.join(teacher_dir, "model"),
          "--out", cache_path, "--crops", "2"])
    lines = open(cache_path).read().splitlines()
    with open(cache_path, "w") as f:
        f.write("\n".join(lines[:10]) + "\n")
    doc = tiny_config_doc()
    doc["kd"] = {"mode": "multi-crop", "crops": 2, "cache_path": cache_path}
    path = tmp_path / "student.json"
    path.write_text(json.dumps(doc))
    assert main(["train", "--config", str(path),
                 "--out", str(tmp_path / "run")]) == 2


def test_hwcost_uniform_plan(tmp_path, capsys):
    plan = tmp_path / "uniform4.json"
    plan.write_text(json.dumps({"assignment": [
        {"module": "everything", "weight_bits": 4, "act_bits": 4,
         "mac_count": 1_000_000},
    ]}))
    assert main(["hwcost", "--assignment", str(plan)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out == {"area": 608.404, "power": 1.58901}


def test_hwcost_bad_plan_exits_1(tmp_path, capsys):
    plan = tmp_path / "bad.json"
    plan.write_text(json.dumps({"assignment": [
        {"module": "x", "weight_bits": 1, "act_bits": 4, "mac_count": 5},
    ]}))
    assert main(["hwcost", "--assignment", str(plan)]) == 1
    assert main(["hwcost", "--assignment", str(tmp_path / "none.json")]) == 1


def test_sweep_sensitivity_tiny_grid(config_path, tmp_path, capsys):
    out = str(tmp_path / "grid")
    assert main(["sweep-sensitivity", "--config", config_path, "--out", out,
                 "--mode", "leave-one-out", "--targets", "ffn,value",
                 "--bits", "3"]) == 0
    grid_csv = os.path.join(out, "grid.csv")
    assert os.path.exists(grid_csv)
    rows = open(grid_csv).read().splitlines()
    assert rows[0] == "mode,target,bitwidth,top1,topk,status"
    assert len(rows) == 1 + 4  # header + all/ffn/value/fp
    assert all(r.endswith("ok") for r in rows[1:])


def test_report_on_missing_directory_exits_1(tmp_path):
    assert main(["report", str(tmp_path / "missing")]) == 1
