import csv
import json
import subprocess
import sys

import pytest

from fedossl import harness
from fedossl.cli import main
from fedossl.config import dump_config
from oracles import tiny_config


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.json"
    dump_config(tiny_config(), path)
    return path


def test_run_writes_every_artifact(tmp_path, config_file, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(config_file), "--seed", "3", "--out", str(out)]) == 0
    assert "best round" in capsys.readouterr().out
    for name in ("config.json", "metrics.csv", "rounds.csv", "train_log.csv", "model.ckpt", "summary.json"):
        assert (out / name).is_file()
    assert sorted(p.name for p in (out / "centroids").iterdir()) == ["round_001.json", "round_002.json"]
    assert len(list((out / "matching").iterdir())) == 2
    assert json.loads((out / "config.json").read_text())["seed"] == 3
    summary = json.loads((out / "summary.json").read_text())
    assert {"best", "final", "best_gap", "final_gap"} <= set(summary)
    with open(out / "metrics.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2
    with open(out / "rounds.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["round"], r["client"]) for r in rows] == [("1", "0"), ("1", "1"), ("2", "0"), ("2", "1")]
    assert all(float(r["anonymity"]) > 0 for r in rows)


def test_run_default_location_follows_environment(tmp_path, config_file, monkeypatch):
    monkeypatch.setenv(harness.OUTPUT_ENV, str(tmp_path / "env"))
    assert main(["run", "--config", str(config_file), "--preset", "base"]) == 0
    assert (tmp_path / "env" / "base_seed0" / "metrics.csv").is_file()


def test_same_seed_gives_identical_metrics(tmp_path, config_file):
    for name in ("a", "b"):
        assert main(["run", "--config", str(config_file), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_sweep_then_compare(tmp_path, config_file, capsys):
    assert main(["sweep", "--config", str(config_file), "--param", "objective.beta",
                 "--values", "0,1", "--out", str(tmp_path)]) == 0
    dirs = sorted((tmp_path / "sweep_objective.beta").iterdir())
    assert [d.name for d in dirs] == ["objective.beta=0", "objective.beta=1"]
    capsys.readouterr()
    assert main(["compare", *map(str, dirs), "--out", str(tmp_path / "cmp")]) == 0
    text = capsys.readouterr().out
    assert "group medians" in text and "deltas against" in text
    for name in ("comparison.txt", "group_medians.csv", "curves.csv"):
        assert (tmp_path / "cmp" / name).is_file()


def test_sweep_over_presets(tmp_path, config_file):
    assert main(["sweep", "--config", str(config_file), "--param", "preset",
                 "--values", "full,base", "--out", str(tmp_path)]) == 0
    cfg = json.loads((tmp_path / "sweep_preset" / 'preset="base"' / "config.json").read_text())
    assert cfg["objective"]["gamma"] == 0.0


def test_seeds_of_one_setting_form_one_group(tmp_path, config_file, capsys, monkeypatch):
    monkeypatch.setenv(harness.OUTPUT_ENV, str(tmp_path / "out"))
    dirs = []
    for seed in (0, 1):
        d = tmp_path / f"s{seed}"
        main(["run", "--config", str(config_file), "--seed", str(seed), "--out", str(d)])
        dirs.append(str(d))
    capsys.readouterr()
    main(["compare", *dirs])
    text = capsys.readouterr().out
    assert "deltas against" not in text
    assert text.count("g0:full") == 3  # two runs plus the median row
    assert (tmp_path / "out" / "compare" / "comparison.txt").is_file()


@pytest.mark.parametrize("argv", [
    ["run", "--preset", "nonsense"],
    ["sweep", "--param", "objective.nothing", "--values", "1"],
    ["sweep", "--param", "objective.beta", "--values=-1"],
    ["frobnicate"],
    ["run", "--seed", "many"],
])
def test_configuration_problems_exit_one(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(harness.OUTPUT_ENV, str(tmp_path))
    assert main(argv) == 1


def test_missing_config_file_exits_one(tmp_path):
    assert main(["run", "--config", str(tmp_path / "absent.json")]) == 1


def test_compare_rejects_non_run_directories(tmp_path, capsys):
    assert main(["compare", str(tmp_path)]) == 1
    assert "not a run directory" in capsys.readouterr().err


def test_runtime_failure_exits_two(tmp_path, config_file, monkeypatch, capsys):
    def boom(cfg, out):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(harness, "run_to_directory", boom)
    assert main(["run", "--config", str(config_file), "--out", str(tmp_path / "x")]) == 2
    assert "diverged" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    done = subprocess.run([sys.executable, "-m", "fedossl", "--help"], capture_output=True, text=True)
    assert done.returncode == 0 and "run" in done.stdout
