import csv
import json
import subprocess
import sys

import pytest

from implicit_dsse.cli import (EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, RUN_DEFAULTS, main, merge_config,
                               parse_cell)
from implicit_dsse.errors import ConfigurationError

FAST = ["--max-epochs", "2", "--batch-size", "8"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    code = main(["gen-data", "--network", "ieee33", "--scenario", "PMU", "--variability", "0.10",
                 "--counts", "16,4,4", "--seed", "7", "--out", str(d / "data.npz")])
    assert code == 0
    return d


def test_gen_data_writes_dataset_and_manifest(workdir):
    man = json.loads((workdir / "data.npz.manifest.json").read_text())
    assert man["command"] == "gen-data"
    assert man["config"]["counts"] == [16, 4, 4] and man["config"]["seed"] == 7
    assert set(man["versions"]) >= {"implicit_dsse", "numpy", "scipy", "python"}
    assert "git" in man and man["seeds"] == [7]


def test_train_eval_chain(workdir):
    d = workdir
    for method in ("sf", "ps"):
        assert main(["train", "--data", str(d / "data.npz"), "--method", method,
                     "--out", str(d / f"{method}.json"), *FAST]) == 0
    assert main(["train", "--data", str(d / "data.npz"), "--method", "il", "--gamma", "0.9",
                 "--warm-start", str(d / "ps.json"), "--out", str(d / "il.json"), *FAST]) == 0
    il = json.loads((d / "il.json").read_text())
    assert il["method"] == "IL" and il["gamma"] == 0.9 and il["config"]["max_epochs"] == 2
    for name in ("sf", "ps", "il"):
        assert main(["eval", "--data", str(d / "data.npz"), "--checkpoint", str(d / f"{name}.json"),
                     "--out", str(d / f"{name}.csv")]) == 0
    rows = list(csv.DictReader(open(d / "il.csv")))
    assert rows[0]["method"] == "IL" and rows[0]["reference"] == "truth"
    assert main(["eval", "--data", str(d / "data.npz"), "--checkpoint", str(d / "ps.json"),
                 "--reference", "retrospective", "--out", str(d / "ps_retro.csv")]) == 0
    assert list(csv.DictReader(open(d / "ps_retro.csv")))[0]["reference"] == "retrospective"
    assert main(["report", "--inputs", str(d / "ps.csv"), str(d / "il.csv"),
                 "--out-dir", str(d / "rep")]) == 0
    imp = list(csv.DictReader(open(d / "rep" / "improvement.csv")))
    assert len(imp) == 1 and float(imp[0]["best_gamma"]) == 0.9


def test_il_refuses_without_warm_start(workdir, capsys):
    code = main(["train", "--data", str(workdir / "data.npz"), "--method", "il", "--gamma", "0.9",
                 "--out", str(workdir / "x.json")])
    assert code == EXIT_CONFIG
    assert "warm-start" in capsys.readouterr().err
    assert not (workdir / "x.json").exists()


def test_il_rejects_non_ps_warm_start(workdir):
    d = workdir
    if not (d / "sf.json").exists():
        main(["train", "--data", str(d / "data.npz"), "--method", "sf", "--out", str(d / "sf.json"), *FAST])
    assert main(["train", "--data", str(d / "data.npz"), "--method", "il", "--warm-start",
                 str(d / "sf.json"), "--out", str(d / "y.json"), *FAST]) == EXIT_CONFIG


def test_field_level_config_errors(tmp_path, capsys):
    assert main(["gen-data", "--variability", "1.5", "--out", str(tmp_path / "a.npz")]) == EXIT_CONFIG
    assert "variability" in capsys.readouterr().err
    assert main(["gen-data", "--scenario", "NOPE", "--out", str(tmp_path / "a.npz")]) == EXIT_CONFIG
    assert "scenario" in capsys.readouterr().err
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "a.npz")]) == EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err
    assert main(["gen-data", "--counts", "1,2", "--out", str(tmp_path / "a.npz")]) == 2
    assert not (tmp_path / "a.npz").exists()


def test_missing_input_is_io_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none.npz"), "--method", "ps"]) == EXIT_IO


def test_numerical_failure_exit_code(tmp_path):
    case = tmp_path / "heavy.case"
    case.write_text(json.dumps({"base_mva": 1.0,
                                "buses": [{"id": 1, "kind": "slack", "p_demand": 0, "q_demand": 0},
                                          {"id": 2, "kind": "load", "p_demand": 50, "q_demand": 25}],
                                "branches": [{"from": 1, "to": 2, "r": 0.01, "x": 0.1}]}))
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"available": [{"kind": "V", "location": 1, "sigma": 0.001}],
                                "delayed": [{"kind": "V", "location": 2, "sigma": 0.01}]}))
    code = main(["gen-data", "--network", str(case), "--plan", str(plan), "--counts", "2,1,1",
                 "--out", str(tmp_path / "d.npz")])
    assert code == EXIT_NUMERIC


def test_config_precedence(tmp_path):
    doc = {"variability": 0.05, "seed": 3, "training": {"learning_rate": 1e-3}}
    cfg = merge_config({"variability": 0.2, "seed": None, "max_epochs": 7}, doc)
    assert cfg["variability"] == 0.2
    assert cfg["seed"] == 3 and cfg["training"]["seed"] == 3
    assert cfg["training"]["learning_rate"] == 1e-3 and cfg["training"]["max_epochs"] == 7
    assert merge_config({}, {})["scenario"] == RUN_DEFAULTS["scenario"]
    with pytest.raises(ConfigurationError, match="training.nope"):
        merge_config({}, {"training": {"nope": 1}})


def test_parse_cell():
    assert parse_cell("ieee33/PMU/0.10") == ("ieee33", "PMU", 0.1)
    with pytest.raises(ConfigurationError):
        parse_cell("ieee33/PMU")
    with pytest.raises(ConfigurationError):
        parse_cell("ieee33/PMU/ten")


def test_repro_small_and_resume(tmp_path):
    out = tmp_path / "r"
    argv = ["repro", "--cell", "ieee33/PMU/0.10", "--seeds", "2", "--counts", "16,4,4",
            "--gammas", "0.5", "--out-dir", str(out), *FAST]
    assert main(argv) == 0
    for name in ("runs.csv", "summary.csv", "improvement.csv", "manifest.json", "pool.npz"):
        assert (out / name).exists()
    runs = list(csv.DictReader(open(out / "runs.csv")))
    assert sorted((r["method"], r["seeds"]) for r in runs) == sorted(
        (m, s) for m in ("SF", "PS", "IL") for s in ("0", "1"))
    summary = {r["method"]: r for r in csv.DictReader(open(out / "summary.csv"))}
    assert summary["PS"]["n_runs"] == "2" and summary["PS"]["rmse_v_std"] != ""
    man = json.loads((out / "manifest.json").read_text())
    assert man["seeds"] == [0, 1] and man["config"]["gammas"] == [0.5]
    first = (out / "summary.csv").read_bytes()
    stamp = (out / "seed0" / "il_g0.5.json").stat().st_mtime_ns
    assert main(argv) == 0  # checkpoints are reused
    assert (out / "seed0" / "il_g0.5.json").stat().st_mtime_ns == stamp
    assert (out / "summary.csv").read_bytes() == first


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "implicit_dsse", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen-data", "train", "eval", "report", "repro"):
        assert cmd in res.stdout
